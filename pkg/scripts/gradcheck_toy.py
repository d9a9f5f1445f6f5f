"""Full finite-difference gradient check of the toy model, one line per parameter tensor."""

import argparse
import sys
import time
from pathlib import Path

from engageformer.config import load_config
from engageformer.training import gradcheck

REPO = Path(__file__).resolve().parents[1]

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--config", default=REPO / "configs" / "toy.cfg")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--max-entries", type=int)
args = ap.parse_args()

start = time.perf_counter()
report = gradcheck(load_config(args.config)[0], args.seed, max_entries=args.max_entries)
print(report.format())
print(f"seconds={time.perf_counter() - start:.1f}")
sys.exit(0 if report.passed else 1)

"""Overfit the toy model on a 32-clip synthetic set and report accuracy, runtime and reproducibility.

    python scripts/overfit_synthetic.py --out runs/overfit
"""

import argparse
import time
from pathlib import Path

from engageformer.config import load_config
from engageformer.data import evaluate, read_manifest, synth_dataset
from engageformer.training import train

REPO = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=REPO / "configs" / "toy_overfit.cfg")
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--per-class", type=int, default=8)
    ap.add_argument("--repeat", action="store_true", help="train twice and compare final checkpoints")
    args = ap.parse_args()

    model_cfg, train_cfg = load_config(args.config)
    out = Path(args.out)
    manifest_path = synth_dataset(args.per_class, model_cfg.classes, model_cfg.clip_shape, train_cfg.seed,
                                  out / "data")
    start = time.perf_counter()
    result = train(model_cfg, train_cfg, manifest_path, out / "run", log=print)
    elapsed = time.perf_counter() - start
    report = evaluate(model_cfg, result.params, read_manifest(manifest_path))
    print(f"steps={result.steps} seconds={elapsed:.1f} train_accuracy={report.accuracy:.4f}")
    print(report.format(), end="")

    if args.repeat:
        train(model_cfg, train_cfg, manifest_path, out / "repeat")
        final = f"epoch_{train_cfg.epochs}.efck"
        same = (out / "run" / final).read_bytes() == (out / "repeat" / final).read_bytes()
        print(f"bit_exact_repeat={same}")


if __name__ == "__main__":
    main()

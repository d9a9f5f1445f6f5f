"""Print token counts, sequence lengths and parameter totals for a config (default: the published one)."""

import argparse
from collections import defaultdict

import numpy as np

from engageformer.config import load_config
from engageformer.model import param_shapes, shape_ledger


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--by-tensor", action="store_true")
    args = ap.parse_args()

    cfg, _ = load_config(args.config)
    ledger = shape_ledger(cfg)
    print(f"clip {cfg.clip_shape}")
    for i, (view, n) in enumerate(zip(cfg.views, ledger.token_counts)):
        print(f"view{i} tubelet {'x'.join(map(str, view))}: {n} tokens")
    print(f"fusion order (ascending tokens): {ledger.ascending}")
    print(f"global sequence length {ledger.global_length}, logits {ledger.logits}")

    groups = defaultdict(int)
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        groups[name.split(".")[0]] += size
        if args.by_tensor:
            print(f"  {name:40s} {str(shape):16s} {size}")
    for group, size in groups.items():
        print(f"{group:10s} {size:>12,}")
    print(f"{'total':10s} {ledger.param_count:>12,}")


if __name__ == "__main__":
    main()

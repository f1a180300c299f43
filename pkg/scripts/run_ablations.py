"""Run every Dilation-Erosion ablation on the synthetic benchmark and print mAP@0.5."""

import argparse
import time
from dataclasses import replace

from detal.cli import load_config
from detal.pipeline import ABLATIONS, run_ablation_suite
from detal.synthgen import generate_dataset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", help="run-config JSON (sections: config, synth)")
    ap.add_argument("--seed", type=int, default=None, help="override both seeds")
    ap.add_argument("--iou", type=float, default=0.5)
    args = ap.parse_args()
    conf = load_config(args.config)
    cfg, synth = conf["config"], conf["synth"]
    if args.seed is not None:
        cfg, synth = replace(cfg, seed=args.seed), replace(synth, seed=args.seed)
    t0 = time.time()
    res = run_ablation_suite(generate_dataset(synth), cfg, tuple(ABLATIONS), args.iou)
    for k, v in res.items():
        print(f"{k:12s} {v:.4f}")
    print(f"elapsed {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()

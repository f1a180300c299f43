"""Command-line entry point: synth, train, mine, infer, eval and gradcheck.

Exit codes: 0 success, 1 invalid config, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from .core import Config, Detection, Segment
from .deminer import Ablation, pool_record
from .evaluation import ANET_AVG, THUMOS_AVG, THUMOS_THRESHOLDS, evaluate, gt_triples
from .formats import FormatError, read_checkpoint, read_jsonl, write_jsonl
from .gradcheck import run_gradcheck
from .model import NumericalError
from .pipeline import RunResult, infer, mine_dataset, run_stage1, run_stage2
from .synthgen import DataError, SynthConfig, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("detal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_SECTIONS = {"config": Config, "synth": SynthConfig, "ablation": Ablation}


class ConfigError(ValueError):
    pass


def _build(cls, section: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kw = dict(section)
    for k, v in kw.items():
        if isinstance(v, list):
            kw[k] = tuple(v)
    return cls(**kw)


def load_config(path) -> dict:
    """Read a JSON config with optional sections config/synth/ablation."""
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except ValueError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    return {k: _build(cls, doc.get(k, {})) for k, cls in CONFIG_SECTIONS.items()}


def _config_from(args) -> dict:
    conf = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        conf["config"] = replace(conf["config"], seed=args.seed)
        conf["synth"] = replace(conf["synth"], seed=args.seed)
    return conf


def _ablation_from(args, base: Ablation) -> Ablation:
    flags = {k: getattr(args, k, False) or getattr(base, k) for k in vars(base)}
    return Ablation(**flags)


def _model_config(header: dict, fallback: Config) -> Config:
    if "config" not in header:
        return fallback
    return _build(Config, header["config"])


def _dataset(args, strict=True):
    return load_dataset(args.data, strict=strict)


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    conf = _config_from(args)
    ds = generate_dataset(conf["synth"])
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.videos)} videos ({len(ds.split('train'))} train, "
          f"{len(ds.split('test'))} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    conf = _config_from(args)
    cfg = conf["config"]
    ablation = _ablation_from(args, conf["ablation"])
    ds = _dataset(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "1":
        run_stage1(ds, cfg, out)
        print(f"stage 1 done, checkpoint {out / 'stage1.ckpt'}")
        return EXIT_OK
    if args.stage == "2":
        if not args.init:
            raise ConfigError("--stage 2 needs --init <stage-1 checkpoint>")
        params, header = read_checkpoint(args.init)
        s1 = RunResult(params, dict(params), [], {}, int(header.get("step", 0)))
    else:
        s1 = run_stage1(ds, cfg, out)
    res = run_stage2(s1, ds, cfg, ablation, out)
    print(f"{ablation.name()} done after {res.step} steps, checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_mine(args) -> int:
    conf = _config_from(args)
    params, header = read_checkpoint(args.checkpoint)
    cfg = _model_config(header, conf["config"])
    ablation = _ablation_from(args, conf["ablation"])
    ds = _dataset(args)
    videos = ds.split(args.split)
    results = mine_dataset(params, ds, videos, cfg, ablation)
    write_jsonl(args.out, [pool_record(v, results[v]) for v in sorted(results)])
    print(f"mined {len(results)} videos to {args.out}")
    return EXIT_OK


def _det_record(d: Detection) -> dict:
    return {"video_id": d.video_id, "start": d.segment.start, "end": d.segment.end,
            "class_id": d.class_id, "confidence": d.confidence}


def _det_from_record(r: dict) -> Detection:
    try:
        return Detection(Segment(int(r["start"]), int(r["end"])), int(r["class_id"]),
                         float(r["confidence"]), str(r["video_id"]))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"bad detection record {r!r}: {e}") from e


def cmd_infer(args) -> int:
    conf = _config_from(args)
    params, header = read_checkpoint(args.checkpoint)
    cfg = _model_config(header, conf["config"])
    ds = _dataset(args, strict=False)
    for vid, err in ds.missing:
        log.warning("skipping %s: %s", vid, err)
    dets = infer(params, ds.split(args.split), cfg, best_only=args.best_only)
    write_jsonl(args.out, [_det_record(d) for d in dets])
    print(f"wrote {len(dets)} detections to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    conf = _config_from(args)
    ds = _dataset(args, strict=False)
    for vid, err in ds.missing:
        log.warning("missing %s: %s", vid, err)
    videos = ds.split(args.split)
    if args.detections:
        try:
            dets = [_det_from_record(r) for r in read_jsonl(args.detections)]
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.detections}: {e}") from e
    elif args.checkpoint:
        params, header = read_checkpoint(args.checkpoint)
        cfg = _model_config(header, conf["config"])
        dets = infer(params, videos, cfg, best_only=args.best_only)
    else:
        raise ConfigError("eval needs --detections or --checkpoint")
    avg = ANET_AVG if args.anet else THUMOS_AVG
    thresholds = tuple(args.thresholds) if args.thresholds else THUMOS_THRESHOLDS
    report = evaluate(dets, gt_triples(videos), thresholds, avg, ds.missing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        csv.writer(f).writerows(report.csv_rows())
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    for t in report.thresholds:
        print(f"mAP@{t:.2f} {report.map_at[t]:.4f}")
    print(f"avg {report.average:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(n_instances=args.instances, seed=args.seed or 0, tol=args.tol)
    for term, err in sorted(rep.per_term().items()):
        print(f"{term:12s} max rel error {err:.2e}")
    print(f"{'PASS' if rep.passed else 'FAIL'} max {rep.max_rel_error:.2e} < {rep.tol:g} "
          f"({len(rep.results)} checks, {rep.seconds:.1f}s)")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

ABLATION_FLAGS = ("no_de", "no_dilation", "no_erosion", "no_hcs", "no_bg", "no_eb", "no_hb")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detal", description="Single-frame supervised temporal action localization.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file with config/synth/ablation sections")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    def ablations(sp):
        for name in ABLATION_FLAGS:
            sp.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="stage-1, stage-2 or two-stage training")
    common(sp)
    sp.add_argument("--stage", choices=("1", "2", "both"), default="both")
    sp.add_argument("--init", help="stage-1 checkpoint for --stage 2")
    sp.add_argument("--out", required=True)
    ablations(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("mine", help="dump the mined pseudo-label pool")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    ablations(sp)
    sp.set_defaults(func=cmd_mine)

    sp = sub.add_parser("infer", help="write detections as JSON lines")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--best-only", action="store_true", help="keep one detection per class and video")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="mAP report as CSV and JSON")
    common(sp)
    sp.add_argument("--detections")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.add_argument("--best-only", action="store_true")
    sp.add_argument("--thresholds", type=float, nargs="+")
    sp.add_argument("--anet", action="store_true", help="average over 0.5:0.05:0.95")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, FileNotFoundError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError) as e:
        print(f"invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

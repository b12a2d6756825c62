"""Command-line interface: gen / train / track / eval / loss-score.

Exit codes: 0 success, 2 usage or validation problem, 1 runtime failure.
Every command that writes an output directory echoes the effective
configuration into it.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfg_mod
from .config import ConfigError, load_config
from .geometry import BoundingBox
from .hsv_io import FormatError, IntegrityError, SynthSpec, generate_synthetic, load_sequence, save_sequence
from .loss import spectral_loss_terms
from .metrics import SequenceResult, evaluate_sequences
from .model import TrackerNet, load_checkpoint, save_checkpoint
from .tracker import load_results, save_results, track_sequence
from .train import fit


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hstrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render synthetic sequences from a spec file")
    p.add_argument("spec_file", help="YAML/JSON file with a 'sequences' list")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=None, help="override the per-sequence seeds")

    p = sub.add_parser("train", help="train a tracker on a directory of sequences")
    p.add_argument("data_dir", nargs="?", default=None, help="directory of sequence dirs (default: data root env)")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default=None, choices=sorted(cfg_mod.PRESETS))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda-spec", type=float, default=None, dest="lambda_spec")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("track", help="run the tracker over one sequence")
    p.add_argument("checkpoint")
    p.add_argument("sequence_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--no-window", action="store_true", dest="no_window")

    p = sub.add_parser("eval", help="score tracking results against ground truth")
    p.add_argument("results_dir")
    p.add_argument("data_dir", nargs="?", default=None)
    p.add_argument("report_out")
    p.add_argument("--plots", action="store_true", help="render precision/success figures")

    p = sub.add_parser("loss-score", help="spectral loss between two patches")
    p.add_argument("template_dir")
    p.add_argument("template_box", help="x,y,w,h (top-left, pixels)")
    p.add_argument("pred_dir")
    p.add_argument("pred_box", help="x,y,w,h (top-left, pixels)")
    p.add_argument("--frame", type=int, default=0, help="frame index in both sequences")

    return parser


def _parse_box(text: str) -> BoundingBox:
    parts = text.split(",")
    if len(parts) != 4:
        raise ConfigError(f"box must be x,y,w,h, got {text!r}")
    x, y, w, h = (float(p) for p in parts)
    return BoundingBox.from_xywh(x, y, w, h)


def _auto_signatures(entry: dict, seed: int) -> dict:
    bands = int(entry.get("bands", 0))
    rng = np.random.default_rng(seed + 7919)
    out = dict(entry)
    if "target_signature" not in out:
        out["target_signature"] = rng.uniform(0.3, 0.95, size=max(bands, 1))
    if "background_signatures" not in out:
        out["background_signatures"] = [
            rng.uniform(0.05, 0.8, size=max(bands, 1)) for _ in range(2)
        ]
    return out


def cmd_gen(args) -> int:
    raw = yaml.safe_load(Path(args.spec_file).read_text())
    if not isinstance(raw, dict) or "sequences" not in raw:
        raise ConfigError("spec file must contain a 'sequences' list")
    out_root = Path(args.out_dir)
    written = []
    for i, entry in enumerate(raw["sequences"]):
        entry = dict(entry)
        name = entry.pop("name", f"seq_{i:03d}")
        seed = args.seed + i if args.seed is not None else int(entry.get("seed", i))
        entry["seed"] = seed
        entry = _auto_signatures(entry, seed)
        if "occlusions" in entry:
            entry["occlusions"] = [tuple(v) for v in entry["occlusions"]]
        for key in ("target_size", "scale_range", "illum_range"):
            if key in entry and isinstance(entry[key], list):
                entry[key] = tuple(entry[key])
        spec = SynthSpec(**entry)
        seq = generate_synthetic(spec)
        save_sequence(seq, out_root / name)
        written.append((name, len(seq), seq.bands))
    for name, frames, bands in written:
        print(f"{name}: {frames} frames, {bands} bands")
    print(f"wrote {len(written)} sequence(s) to {out_root}")
    return 0


def _load_dataset(data_dir: Path):
    if (data_dir / "meta.json").is_file():
        return {data_dir.name: load_sequence(data_dir)}
    out = {}
    for sub in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        if (sub / "meta.json").is_file():
            out[sub.name] = load_sequence(sub)
    if not out:
        raise FormatError(f"no sequences found under {data_dir}")
    return out


def cmd_train(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lambda_spec is not None:
        overrides.setdefault("loss", {})["lambda_spec"] = args.lambda_spec
    cfg = load_config(args.config, preset=args.preset, overrides=overrides)

    data_dir = cfg_mod.data_root(args.data_dir)
    dataset = list(_load_dataset(data_dir).values())

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_mod.echo_config(cfg, out_dir)

    start_epoch = 0
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        start_epoch = int(meta.get("epoch", 0))
        if model.cfg != cfg_mod.model_config(cfg):
            raise ConfigError("resume checkpoint was built with a different model config")
    else:
        model = TrackerNet(cfg_mod.model_config(cfg))

    train_cfg = cfg_mod.train_config(cfg)
    fit(
        model,
        dataset,
        train_cfg,
        tracker_cfg=cfg_mod.tracker_config(cfg),
        weights=cfg_mod.loss_weights(cfg),
        log_path=out_dir / "train_log.jsonl",
        start_epoch=start_epoch,
        progress=not args.quiet,
    )
    ckpt = out_dir / "checkpoint.ckpt"
    save_checkpoint(model, ckpt, epoch=train_cfg.epochs)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_track(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.eta is not None:
        overrides.setdefault("tracker", {})["eta"] = args.eta
    if args.no_window:
        overrides.setdefault("tracker", {})["window_weight"] = 0.0
    cfg = load_config(args.config, overrides=overrides)

    model, _ = load_checkpoint(ckpt_path)
    seq = load_sequence(args.sequence_dir)
    if not seq.ground_truth:
        raise ConfigError(f"{args.sequence_dir} has no ground truth to initialize from")
    boxes, scores = track_sequence(model, seq, config=cfg_mod.tracker_config(cfg))
    out_dir = Path(args.out_dir)
    save_results(out_dir, boxes, scores)
    cfg_mod.echo_config(cfg, out_dir)
    print(f"tracked {len(boxes)} frames -> {out_dir / 'results.txt'}")
    return 0


def cmd_eval(args) -> int:
    data_dir = cfg_mod.data_root(args.data_dir)
    sequences = _load_dataset(data_dir)
    results_dir = Path(args.results_dir)

    results = []
    for name, seq in sorted(sequences.items()):
        candidates = [results_dir / name / "results.txt", results_dir / "results.txt"]
        path = next((c for c in candidates if c.is_file()), None)
        if path is None:
            raise ConfigError(f"no results.txt for sequence {name!r} under {results_dir}")
        pred = load_results(path)
        if seq.ground_truth is None:
            raise ConfigError(f"sequence {name!r} has no ground truth")
        if len(pred) != len(seq.ground_truth):
            raise ConfigError(
                f"sequence {name!r}: {len(pred)} results vs {len(seq.ground_truth)} ground-truth boxes"
            )
        results.append(
            SequenceResult(
                name=name, pred_boxes=pred, gt_boxes=seq.ground_truth, attributes=seq.attributes
            )
        )

    report = evaluate_sequences(results)
    report_path = Path(args.report_out)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2))
    print(
        f"AUC {report['overall']['auc']:.4f}  DP@20 {report['overall']['dp20']:.4f}  "
        f"({len(results)} sequences) -> {report_path}"
    )
    if args.plots:
        from .plots import render_curves

        for path in render_curves(report, report_path.parent):
            print(f"plot written to {path}")
    return 0


def cmd_loss_score(args) -> int:
    t_seq = load_sequence(args.template_dir)
    p_seq = load_sequence(args.pred_dir)
    if t_seq.bands != p_seq.bands:
        raise ConfigError(f"band counts differ: {t_seq.bands} vs {p_seq.bands}")
    t_box = _parse_box(args.template_box)
    p_box = _parse_box(args.pred_box)
    if args.frame >= len(t_seq) or args.frame >= len(p_seq):
        raise ConfigError(f"frame {args.frame} is out of range")
    total, terms = spectral_loss_terms(
        t_seq.frames[args.frame], t_box, p_seq.frames[args.frame], p_box
    )
    print(json.dumps({"total": total, "regions": terms}, indent=2))
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "loss-score": cmd_loss_score,
}

_VALIDATION_ERRORS = (
    ConfigError,
    FormatError,
    IntegrityError,
    ValueError,
    FileNotFoundError,
    NotADirectoryError,
    KeyError,
    TypeError,
)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mtnet train | segment | eval | bench``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .io_formats import (
    FormatError,
    ValidationError,
    load_model,
    load_sequence,
    parse_config,
    read_pgm,
    read_ppm,
    save_model,
    write_pgm,
)
from .metrics import evaluate_predictions, matching_scaling, profile_pipeline
from .pipeline import NumericFailure, TrainingSample, generate_synthetic_sample, segment_sequence, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mtnet")


@dataclass
class CommandOutcome:
    code: int
    summary: str
    report_path: str | None = None


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- train --------------------------------------------------------------------


def _load_pairs(directory: Path) -> list[TrainingSample]:
    """``DIR/images/NAME.ppm`` with ``DIR/masks/NAME.pgm``; nonzero labels are foreground."""
    images = directory / "images"
    masks = directory / "masks"
    if not images.is_dir() or not masks.is_dir():
        raise DataError(f"{directory}: expected images/ and masks/ subdirectories")
    samples = []
    for img_path in sorted(images.glob("*.ppm")):
        mask_path = masks / (img_path.stem + ".pgm")
        if not mask_path.is_file():
            raise DataError(f"{mask_path}: missing mask for {img_path.name}")
        img = read_ppm(img_path)
        m = read_pgm(mask_path)
        if m.shape != img.shape[:2]:
            raise DataError(f"{mask_path}: size {m.shape} differs from image {img.shape[:2]}")
        samples.append(
            TrainingSample(
                img.transpose(2, 0, 1)[None].astype(np.float32),
                (m > 0).astype(np.float32)[None, None],
                provenance=f"loaded:{img_path.name}",
            )
        )
    if not samples:
        raise DataError(f"{images}: no .ppm images")
    return samples


def cmd_train(args) -> CommandOutcome:
    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg, model_cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.data is not None:
        samples = _load_pairs(Path(args.data))
        small = [s.provenance for s in samples if min(s.image.shape[2:]) < cfg.crop_size]
        if small:
            raise DataError(f"images smaller than crop size {cfg.crop_size}: {', '.join(small)}")
    else:
        if args.synthetic < 1:
            raise UsageError("--synthetic must be >= 1")
        rng = np.random.default_rng(cfg.seed)
        samples = [generate_synthetic_sample(rng, cfg.sample_size) for _ in range(args.synthetic)]

    params, losses = train(samples, cfg, model_config=model_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(params, out)
    trace = out.with_name(out.name + ".loss.txt")
    with open(trace, "w") as f:
        f.write("# iteration\tdice_loss\n")
        for i, loss in enumerate(losses):
            f.write(f"{i + 1}\t{loss:.9g}\n")
    tail = float(np.mean(losses[-min(100, len(losses)) :]))
    return CommandOutcome(
        EXIT_OK,
        f"trained {len(losses)} iterations on {len(samples)} samples, final mean loss {tail:.4f}; wrote {out} and {trace}",
        str(trace),
    )


# -- segment ------------------------------------------------------------------


def cmd_segment(args) -> CommandOutcome:
    model_path = Path(args.model)
    if not model_path.is_file():
        raise DataError(f"model file not found: {model_path}")
    params = load_model(model_path)
    bundle = load_sequence(args.seq)
    if bundle.n_objects < 1:
        raise DataError(f"{args.seq}: reference mask has no object labels")
    labels = segment_sequence(bundle, params, warp=args.warp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fid, lab in zip(bundle.frame_ids, labels):
        write_pgm(lab, out / f"{fid:05d}.pgm")
    return CommandOutcome(
        EXIT_OK, f"segmented {len(labels) - 1} frames with {bundle.n_objects} object(s) into {out}"
    )


# -- eval ---------------------------------------------------------------------


def _mask_dir(path: Path) -> Path:
    if (path / "masks").is_dir():
        return path / "masks"
    return path


def _read_masks(directory: Path) -> dict[int, np.ndarray]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return {int(p.stem): read_pgm(p) for p in sorted(directory.glob("*.pgm")) if p.stem.isdigit()}


def cmd_eval(args) -> CommandOutcome:
    gt_all = _read_masks(_mask_dir(Path(args.gt)))
    pred_all = _read_masks(_mask_dir(Path(args.pred)))
    if not gt_all:
        raise DataError(f"{args.gt}: no ground-truth masks")
    ref_id = min(gt_all)
    n_objects = int(gt_all[ref_id].max())
    # the reference frame is given, not predicted
    gts = {k: v for k, v in gt_all.items() if k != ref_id}
    preds = {k: v for k, v in pred_all.items() if k != ref_id}
    if set(preds) != set(gts):
        raise DataError(
            f"frame count mismatch: {len(preds)} predicted vs {len(gts)} ground-truth frames "
            f"(missing {sorted(set(gts) - set(preds))}, extra {sorted(set(preds) - set(gts))})"
        )
    for k in gts:
        if preds[k].shape != gts[k].shape:
            raise DataError(f"frame {k:05d}: prediction {preds[k].shape} vs ground truth {gts[k].shape}")
    name = Path(args.gt).name
    report = evaluate_predictions(preds, gts, n_objects, sequence=name)
    doc = report.to_dict()
    doc["n_objects"] = n_objects
    doc["reference_frame"] = ref_id
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return CommandOutcome(
        EXIT_OK,
        f"{len(report.frames)} frames: J {report.J_mean:.4f}  F {report.F_mean:.4f}  J&F {report.JF_mean:.4f}; report {out}",
        str(out),
    )


# -- bench --------------------------------------------------------------------


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise UsageError(f"--size must be positive, got {text!r}")
    return w, h


def cmd_bench(args) -> CommandOutcome:
    w, h = _parse_size(args.size)
    if args.repeats < 3:
        raise UsageError("--repeats must be >= 3")
    model_path = Path(args.model)
    if not model_path.is_file():
        raise DataError(f"model file not found: {model_path}")
    params = load_model(model_path)
    s = params.stride
    if h % s or w % s:
        raise UsageError(f"--size {w}x{h} is not divisible by the model stride {s}")
    timings = profile_pipeline(params, (h, w), args.repeats, warp=args.warp, workers=args.workers)
    t_small, t_large, ratio = matching_scaling(params.config.embed_dim, repeats=args.repeats)
    print(timings.table())
    print(f"matching scaling: 8x8 {t_small:.4f} ms, 16x16 {t_large:.4f} ms, ratio {ratio:.2f} (ideal 16)")
    return CommandOutcome(EXIT_OK, f"benchmarked {w}x{h}: {timings.total_ms:.2f} ms/frame, {timings.fps:.2f} fps")


# -- entry --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtnet", description="Mask transfer video object segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on still images")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data", help="directory with images/*.ppm and masks/*.pgm")
    src.add_argument("--synthetic", type=int, default=50, metavar="K")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="segment a sequence from its reference mask")
    s.add_argument("--model", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--warp", choices=("scatter", "gather"), default="scatter")
    s.set_defaults(func=cmd_segment)

    e = sub.add_parser("eval", help="score predicted masks")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage runtime")
    b.add_argument("--model", required=True)
    b.add_argument("--size", default="128x128", help="WxH")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warp", choices=("scatter", "gather"), default="scatter")
    b.add_argument("--workers", type=int, default=1, help="also time matching with this many threads")
    b.set_defaults(func=cmd_bench)
    return p


def run(argv=None) -> CommandOutcome:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "verbose", False):
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        return CommandOutcome(EXIT_USAGE, str(exc))
    except (DataError, FormatError, ValidationError, FileNotFoundError, NotADirectoryError) as exc:
        return CommandOutcome(EXIT_DATA, str(exc))
    except ValueError as exc:
        # shape and range violations raised while running on the data
        return CommandOutcome(EXIT_DATA, str(exc))
    except (NumericFailure, FloatingPointError) as exc:
        return CommandOutcome(EXIT_NUMERIC, f"numeric failure: {exc}")


def main(argv=None) -> int:
    outcome = run(argv)
    if outcome.code == EXIT_OK:
        print(outcome.summary)
    else:
        print(f"error: {outcome.summary}".replace("\n", " "), file=sys.stderr)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())

"""Region similarity (J), contour accuracy (F), sequence evaluation and
per-stage timing of the network."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .matching import apply_routing, decode_displacement, gather_routing, global_correlation, scatter_routing
from .netblocks import ModelParameters, decode, embed, encode_image, encode_mask
from .pipeline.model import forward


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol_fraction: float = 0.008) -> float:
    """F-measure between mask boundaries, matched within a dilation tolerance.

    The tolerance radius is ``ceil(tol_fraction * image diagonal)`` pixels.
    """
    if not 0 < tol_fraction <= 0.1:
        raise ValueError(f"tol_fraction must be in (0, 0.1], got {tol_fraction}")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp = boundary_pixels(pred)
    bg = boundary_pixels(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    radius = max(1, math.ceil(tol_fraction * math.hypot(*pred.shape)))
    disk = _disk(radius)
    precision = np.count_nonzero(bp & ndimage.binary_dilation(bg, disk)) / n_p
    recall = np.count_nonzero(bg & ndimage.binary_dilation(bp, disk)) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class FrameScore:
    sequence: str
    frame: int
    J: float
    F: float


@dataclass
class EvalReport:
    frames: list[FrameScore] = field(default_factory=list)

    def _per_sequence(self):
        seqs: dict[str, list[FrameScore]] = {}
        for r in self.frames:
            seqs.setdefault(r.sequence, []).append(r)
        return seqs

    @property
    def sequence_means(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, rows in self._per_sequence().items():
            j = float(np.mean([r.J for r in rows]))
            f = float(np.mean([r.F for r in rows]))
            out[name] = {"J": j, "F": f, "JF": (j + f) / 2, "frames": len(rows)}
        return out

    @property
    def J_mean(self) -> float:
        return float(np.mean([r.J for r in self.frames])) if self.frames else float("nan")

    @property
    def F_mean(self) -> float:
        return float(np.mean([r.F for r in self.frames])) if self.frames else float("nan")

    @property
    def JF_mean(self) -> float:
        return (self.J_mean + self.F_mean) / 2

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.frames.extend(other.frames)
        return self

    def to_dict(self) -> dict:
        return {
            "frames": [asdict(r) for r in self.frames],
            "sequences": self.sequence_means,
            "global": {"J_mean": self.J_mean, "F_mean": self.F_mean, "JF_mean": self.JF_mean, "frames": len(self.frames)},
        }


def score_frame(pred_labels: np.ndarray, gt_labels: np.ndarray, n_objects: int, tol_fraction: float = 0.008) -> tuple[float, float]:
    """J and F averaged over object labels 1..n_objects."""
    objects = range(1, max(n_objects, 1) + 1)
    js = [jaccard(pred_labels == m, gt_labels == m) for m in objects]
    fs = [boundary_f(pred_labels == m, gt_labels == m, tol_fraction) for m in objects]
    return float(np.mean(js)), float(np.mean(fs))


def evaluate_predictions(
    preds: dict[int, np.ndarray],
    gts: dict[int, np.ndarray],
    n_objects: int,
    sequence: str = "",
    tol_fraction: float = 0.008,
) -> EvalReport:
    """Score predicted label maps against ground truth; both keyed by frame id."""
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ValueError(f"no prediction for frames {missing}")
    report = EvalReport()
    for fid in sorted(gts):
        j, f = score_frame(preds[fid], gts[fid], n_objects, tol_fraction)
        report.frames.append(FrameScore(sequence, fid, j, f))
    return report


def evaluate_sequence(seq, params: ModelParameters, warp: str = "scatter", tol_fraction: float = 0.008) -> EvalReport:
    """Segment every non-reference frame that has ground truth and score it."""
    from .pipeline.segment import segment_frame

    preds, gts = {}, {}
    for pos, gt in seq.gt_masks.items():
        if pos == 0:
            continue
        preds[seq.frame_ids[pos]] = segment_frame(
            seq.frames[0], seq.reference_mask, seq.frames[pos], params, seq.n_objects, warp
        )
        gts[seq.frame_ids[pos]] = gt
    return evaluate_predictions(preds, gts, seq.n_objects, seq.name, tol_fraction)


# -- profiling ----------------------------------------------------------------

STAGES = ("image_encoder", "mask_encoder", "pixel_matching", "decoder")
STAGE_TITLES = {
    "image_encoder": "Image encoder",
    "mask_encoder": "Mask encoder",
    "pixel_matching": "Pixel matching",
    "decoder": "Bottom-up decoder",
}


@dataclass
class StageTimings:
    stages_ms: dict[str, float]
    total_ms: float
    repeats: int
    input_size: tuple[int, int]
    workers: int = 1
    parallel_matching_ms: float | None = None

    @property
    def stage_sum_ms(self) -> float:
        return sum(self.stages_ms.values())

    @property
    def fps(self) -> float:
        return 1000.0 / self.total_ms

    def table(self) -> str:
        h, w = self.input_size
        lines = [f"Per-stage runtime, {w}x{h} input, median of {self.repeats} runs", f"{'Module':<20}{'ms':>10}"]
        for s in STAGES:
            lines.append(f"{STAGE_TITLES[s]:<20}{self.stages_ms[s]:>10.3f}")
        lines.append(f"{'Total':<20}{self.total_ms:>10.3f}")
        lines.append(f"fps: {self.fps:.2f}")
        if self.parallel_matching_ms is not None:
            lines.append(f"pixel matching with {self.workers} workers: {self.parallel_matching_ms:.3f} ms")
        return "\n".join(lines)


def median_ms(fn, repeats: int, inner: int = 1) -> float:
    """Median wall time of ``fn`` in ms after one discarded warm-up call."""
    if repeats < 3:
        raise ValueError("at least 3 repeats are required")
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        samples.append((time.perf_counter() - t0) * 1000.0 / inner)
    return statistics.median(samples)


def profile_pipeline(
    params: ModelParameters,
    frame_size: tuple[int, int] = (128, 128),
    repeats: int = 5,
    warp: str = "scatter",
    workers: int = 1,
    seed: int = 0,
) -> StageTimings:
    """Time the four network stages in isolation, plus the whole forward pass."""
    h, w = frame_size
    rng = np.random.default_rng(seed)
    dtype = params.tensors["enc.c0.w"].dtype
    ref = rng.random((1, 3, h, w)).astype(dtype)
    tgt = rng.random((1, 3, h, w)).astype(dtype)
    mask = np.zeros((1, 1, h, w), dtype=dtype)
    mask[..., h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = 1

    f_ref, f_tgt = encode_image(ref, params), encode_image(tgt, params)
    m_feat = encode_mask(mask, params)
    dec_in = f_tgt if params.config.decoder_features == "encoder" else embed(f_tgt, params)

    def matching(n_workers=1):
        er, et = embed(f_ref, params), embed(f_tgt, params)
        vol = global_correlation(er, et, workers=n_workers)
        routing = scatter_routing(decode_displacement(vol)) if warp == "scatter" else gather_routing(vol)
        return apply_routing(m_feat, routing)

    warped = matching()
    stages = {
        "image_encoder": median_ms(lambda: (encode_image(ref, params), encode_image(tgt, params)), repeats),
        "mask_encoder": median_ms(lambda: encode_mask(mask, params), repeats),
        "pixel_matching": median_ms(matching, repeats),
        "decoder": median_ms(lambda: decode(dec_in, warped, params, (h, w)), repeats),
    }
    total = median_ms(lambda: forward(ref, mask, tgt, params, warp=warp), repeats)
    parallel = median_ms(lambda: matching(workers), repeats) if workers > 1 else None
    return StageTimings(stages, total, repeats, (h, w), workers, parallel)


def matching_scaling(embed_dim: int = 32, n: int = 8, repeats: int = 7, seed: int = 0) -> tuple[float, float, float]:
    """Median global-correlation time on n x n and 2n x 2n grids, and their ratio."""
    rng = np.random.default_rng(seed)
    small = [rng.standard_normal((1, embed_dim, n, n)).astype(np.float32) for _ in range(2)]
    large = [rng.standard_normal((1, embed_dim, 2 * n, 2 * n)).astype(np.float32) for _ in range(2)]
    # batch calls so the small grid is not timer-resolution bound
    inner_small = 50
    t_small = median_ms(lambda: global_correlation(*small), repeats, inner_small)
    t_large = median_ms(lambda: global_correlation(*large), repeats, max(1, inner_small // 16))
    return t_small, t_large, t_large / t_small

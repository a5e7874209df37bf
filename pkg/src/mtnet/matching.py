"""Global pixel matching between two embedding maps and mask-feature warping.

Correlation volumes use a D*D displacement layout per reference pixel with
``d_m = max(w, h)`` and ``D = 2*d_m + 1``. Slot ``k`` of pixel ``(y, x)``
holds the score against target ``(y + dy, x + dx)`` where
``dx = k mod D - d_m`` and ``dy = k div D - d_m``. Displacements that leave
the target grid hold :func:`sentinel`.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numcore import ShapeError, as_tensor4


def sentinel(dtype=np.float32) -> float:
    """Most negative representable score; marks out-of-frame displacement slots."""
    return float(np.finfo(dtype).min)


@dataclass
class CorrelationVolume:
    grid_h: int
    grid_w: int
    d_m: int
    scores: np.ndarray  # (batch, grid_h, grid_w, D*D)

    @property
    def D(self) -> int:
        return 2 * self.d_m + 1

    @property
    def sentinel(self) -> float:
        return sentinel(self.scores.dtype)


@dataclass
class DisplacementField:
    dx: np.ndarray  # (batch, grid_h, grid_w) int
    dy: np.ndarray
    best_score: np.ndarray
    index: np.ndarray  # argmax slot per pixel

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.dx.shape[1:]


def _check_position(pos, h: int, w: int) -> None:
    y, x = pos
    if not (0 <= y < h and 0 <= x < w):
        raise ShapeError(f"position {pos} outside {h}x{w} grid")


def correlation_score(emb_ref: np.ndarray, emb_tgt: np.ndarray, ref_pos, tgt_pos, window: int = 0) -> float:
    """Windowed patch correlation of two pixels; positions are (row, col).

    Parameter-free: sum over offsets in ``[-window, window]^2`` of channel dot
    products, with zero contribution from offsets that leave either grid.
    Inputs are (C, H, W) or single-item (1, C, H, W) maps.
    """
    fr = emb_ref[0] if emb_ref.ndim == 4 else emb_ref
    ft = emb_tgt[0] if emb_tgt.ndim == 4 else emb_tgt
    if window < 0:
        raise ValueError("window must be >= 0")
    _, hr, wr = fr.shape
    _, ht, wt = ft.shape
    _check_position(ref_pos, hr, wr)
    _check_position(tgt_pos, ht, wt)
    total = 0.0
    for oy in range(-window, window + 1):
        for ox in range(-window, window + 1):
            ry, rx = ref_pos[0] + oy, ref_pos[1] + ox
            ty, tx = tgt_pos[0] + oy, tgt_pos[1] + ox
            if 0 <= ry < hr and 0 <= rx < wr and 0 <= ty < ht and 0 <= tx < wt:
                total += float(np.dot(fr[:, ry, rx], ft[:, ty, tx]))
    return total


@lru_cache(maxsize=32)
def _slot_index(h: int, w: int) -> np.ndarray:
    """Volume slot of target pixel j for reference pixel i, as an (N, N) table."""
    d_m = max(h, w)
    D = 2 * d_m + 1
    ys, xs = np.divmod(np.arange(h * w), w)
    dy = ys[None, :] - ys[:, None]
    dx = xs[None, :] - xs[:, None]
    slot = (dy + d_m) * D + (dx + d_m)
    slot.setflags(write=False)
    return slot


def _pair_scores(fr: np.ndarray, ft: np.ndarray, window: int) -> np.ndarray:
    """(N_ref, N_tgt) matrix of windowed correlation scores for one item."""
    c, h, w = fr.shape
    if window == 0:
        return fr.reshape(c, -1).T @ ft.reshape(c, -1)
    d = window
    pr = np.pad(fr, ((0, 0), (d, d), (d, d)))
    pt = np.pad(ft, ((0, 0), (d, d), (d, d)))
    out = np.zeros((h * w, h * w), dtype=np.result_type(fr, ft))
    for oy in range(2 * d + 1):
        for ox in range(2 * d + 1):
            a = pr[:, oy : oy + h, ox : ox + w].reshape(c, -1)
            b = pt[:, oy : oy + h, ox : ox + w].reshape(c, -1)
            out += a.T @ b
    return out


def global_correlation(
    emb_ref: np.ndarray, emb_tgt: np.ndarray, window: int = 0, workers: int = 1
) -> CorrelationVolume:
    """Score every reference pixel against every target pixel.

    ``workers > 1`` splits reference rows over a thread pool; results are
    identical to the sequential path.
    """
    emb_ref = as_tensor4(emb_ref)
    emb_tgt = as_tensor4(emb_tgt)
    if emb_ref.shape != emb_tgt.shape:
        raise ShapeError(f"embedding shapes differ: {emb_ref.shape} vs {emb_tgt.shape}")
    b, c, h, w = emb_ref.shape
    d_m = max(h, w)
    D = 2 * d_m + 1
    n = h * w
    dtype = np.result_type(emb_ref, emb_tgt)
    slot = _slot_index(h, w)
    scores = np.full((b, n, D * D), sentinel(dtype), dtype=dtype)
    rows = np.arange(n)[:, None]
    for k in range(b):
        if workers > 1 and window == 0 and n > 1:
            fr = emb_ref[k].reshape(c, n)
            ft = emb_tgt[k].reshape(c, n)
            chunks = np.array_split(np.arange(n), workers)

            def fill(idx, k=k, fr=fr, ft=ft):
                scores[k, idx[:, None], slot[idx]] = fr[:, idx].T @ ft

            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(fill, chunks))
        else:
            scores[k, rows, slot] = _pair_scores(emb_ref[k], emb_tgt[k], window)
    return CorrelationVolume(h, w, d_m, scores.reshape(b, h, w, D * D))


def pair_scores_from_volume(volume: CorrelationVolume) -> np.ndarray:
    """Recover the (batch, N_ref, N_tgt) score matrix from a volume."""
    h, w = volume.grid_h, volume.grid_w
    n = h * w
    b = volume.scores.shape[0]
    flat = volume.scores.reshape(b, n, -1)
    return np.take_along_axis(flat, np.broadcast_to(_slot_index(h, w), (b, n, n)), axis=2)


def slot_displacement(index, d_m: int):
    """(dx, dy) encoded by displacement slot ``index``: ``index mod D - d_m, index div D - d_m``."""
    dy, dx = np.divmod(index, 2 * d_m + 1)
    return dx - d_m, dy - d_m


def decode_displacement(volume: CorrelationVolume) -> DisplacementField:
    """Per-pixel argmax over displacement slots (lowest slot on ties)."""
    idx = np.argmax(volume.scores, axis=-1)
    best = np.take_along_axis(volume.scores, idx[..., None], axis=-1)[..., 0]
    if np.any(best == volume.sentinel):
        raise RuntimeError("a reference pixel has no in-frame displacement")
    dx, dy = slot_displacement(idx, volume.d_m)
    return DisplacementField(dx, dy, best, idx)


@dataclass
class Routing:
    """Which source pixel fills each written target pixel (flat indices per item)."""

    src: list[np.ndarray]
    dst: list[np.ndarray]
    grid_shape: tuple[int, int]


def scatter_routing(field: DisplacementField) -> Routing:
    b = field.dx.shape[0]
    h, w = field.grid_shape
    ys, xs = np.divmod(np.arange(h * w), w)
    srcs, dsts = [], []
    for k in range(b):
        ty = ys + field.dy[k].reshape(-1)
        tx = xs + field.dx[k].reshape(-1)
        if np.any((ty < 0) | (ty >= h) | (tx < 0) | (tx >= w)):
            raise RuntimeError("displacement points outside the target grid")
        tgt = ty * w + tx
        score = field.best_score[k].reshape(-1)
        src = np.arange(h * w)
        # per target: highest score wins, then lowest source index
        order = np.lexsort((src, -score.astype(np.float64), tgt))
        tgt_sorted = tgt[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
        srcs.append(src[order][first])
        dsts.append(tgt_sorted[first])
    return Routing(srcs, dsts, (h, w))


def gather_routing(volume: CorrelationVolume) -> Routing:
    """Every target pixel pulls its best-scoring reference pixel (lowest index on ties)."""
    b = volume.scores.shape[0]
    h, w = volume.grid_h, volume.grid_w
    pair = pair_scores_from_volume(volume)
    srcs = [np.argmax(pair[k], axis=0) for k in range(b)]
    dsts = [np.arange(h * w) for _ in range(b)]
    return Routing(srcs, dsts, (h, w))


def apply_routing(features: np.ndarray, routing: Routing) -> np.ndarray:
    features = as_tensor4(features)
    b, c, h, w = features.shape
    if (h, w) != routing.grid_shape or b != len(routing.src):
        raise ShapeError(f"mask features {features.shape} do not match field grid {routing.grid_shape}")
    flat = features.reshape(b, c, h * w)
    out = np.zeros_like(flat)
    for k in range(b):
        out[k][:, routing.dst[k]] = flat[k][:, routing.src[k]]
    return out.reshape(b, c, h, w)


def apply_routing_backward(grad_out: np.ndarray, routing: Routing) -> np.ndarray:
    b, c, h, w = grad_out.shape
    g = grad_out.reshape(b, c, h * w)
    gin = np.zeros_like(g)
    for k in range(b):
        # a source may feed several targets under gather routing
        np.add.at(gin[k], (slice(None), routing.src[k]), g[k][:, routing.dst[k]])
    return gin.reshape(b, c, h, w)


def warp_mask_features(mask_features: np.ndarray, field: DisplacementField) -> np.ndarray:
    """Scatter each reference vector onto its matched target slot.

    Colliding writes keep the higher-scoring source (then the lower source
    index); target slots nobody writes stay zero.
    """
    mask_features = as_tensor4(mask_features)
    if mask_features.shape[2:] != field.grid_shape:
        raise ShapeError(f"mask features {mask_features.shape} do not match field grid {field.grid_shape}")
    return apply_routing(mask_features, scatter_routing(field))


def warp_mask_features_gather(mask_features: np.ndarray, volume: CorrelationVolume) -> np.ndarray:
    mask_features = as_tensor4(mask_features)
    if mask_features.shape[2:] != (volume.grid_h, volume.grid_w):
        raise ShapeError("mask features do not match the correlation grid")
    return apply_routing(mask_features, gather_routing(volume))


def soft_match_backward(
    emb_ref: np.ndarray,
    emb_tgt: np.ndarray,
    mask_features: np.ndarray,
    grad_warped: np.ndarray,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Surrogate gradient for the embeddings through a softmax relaxation.

    The forward warp is a hard copy; for the backward pass each target slot is
    treated as ``sum_i softmax_i(s_ij / T) * m_i`` (window 0 scores), and the
    incoming gradient is pushed through that soft map into both embeddings.
    """
    b, c, h, w = emb_ref.shape
    n = h * w
    g_ref = np.zeros_like(emb_ref)
    g_tgt = np.zeros_like(emb_tgt)
    for k in range(b):
        fr = emb_ref[k].reshape(c, n)
        ft = emb_tgt[k].reshape(c, n)
        m = mask_features[k].reshape(-1, n)
        g = grad_warped[k].reshape(-1, n)
        s = (fr.T @ ft) / temperature  # (N_ref, N_tgt)
        s = s - s.max(axis=0, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=0, keepdims=True)
        ga = m.T @ g  # dL/dA_ij = <m_i, g_j>
        gs = a * (ga - np.sum(a * ga, axis=0, keepdims=True)) / temperature
        g_ref[k] = (ft @ gs.T).reshape(c, h, w)
        g_tgt[k] = (fr @ gs).reshape(c, h, w)
    return g_ref, g_tgt

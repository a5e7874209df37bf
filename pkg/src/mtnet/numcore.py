"""Dense NCHW tensors, layers with hand-written gradients, Adam, and a
finite-difference gradient checker.

Tensors are plain ``numpy`` arrays of rank 4 laid out as
(batch, channel, row, column). Every op here is a pure function of its
arguments; nothing keeps state between calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor4 = np.ndarray


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


def as_tensor4(x, dtype=None) -> Tensor4:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class ConvParams:
    """Weights for a 2-D convolution.

    ``weight`` is (out_channels, in_channels, kh, kw) for :func:`conv2d` and
    (in_channels, out_channels, kh, kw) for :func:`transposed_conv2d`.
    ``padding`` may be a single int or a (rows, cols) pair.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got {self.weight.shape}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")


@dataclass
class ConvGrads:
    weight: np.ndarray
    bias: np.ndarray


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_output_shape(in_hw: tuple[int, int], params: ConvParams) -> tuple[int, int]:
    kh, kw = params.weight.shape[2:]
    ph, pw = _pair(params.padding)
    return (_conv_out(in_hw[0], kh, params.stride, ph), _conv_out(in_hw[1], kw, params.stride, pw))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _validate_conv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    x = as_tensor4(x)
    out_c, in_c, kh, kw = params.weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernels must have odd extents, got {kh}x{kw}")
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_c}")
    if params.bias.shape != (out_c,):
        raise ShapeError(f"bias shape {params.bias.shape} != ({out_c},)")
    ho, wo = conv2d_output_shape(x.shape[2:], params)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo}) for input {x.shape}")
    return ho, wo


def conv2d(x: Tensor4, params: ConvParams) -> Tensor4:
    """Cross-correlation with zero padding (no kernel flip)."""
    ho, wo = _validate_conv(x, params)
    kh, kw = params.weight.shape[2:]
    ph, pw = _pair(params.padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = _windows(xp, kh, kw, params.stride, ho, wo)
    y = np.tensordot(win, params.weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    y = y.transpose(0, 3, 1, 2)
    y += params.bias[None, :, None, None]
    return np.ascontiguousarray(y, dtype=np.result_type(x, params.weight))


def conv2d_backward(x: Tensor4, params: ConvParams, grad_out: Tensor4) -> tuple[Tensor4, ConvGrads]:
    ho, wo = _validate_conv(x, params)
    n, out_c = x.shape[0], params.weight.shape[0]
    if grad_out.shape != (n, out_c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output {(n, out_c, ho, wo)}")
    kh, kw = params.weight.shape[2:]
    ph, pw = _pair(params.padding)
    s = params.stride
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    win = _windows(xp, kh, kw, s, ho, wo)
    gw = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
    gb = grad_out.sum(axis=(0, 2, 3))
    # scatter each kernel tap back onto the padded input
    cols = np.tensordot(grad_out, params.weight, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, kh, kw, Ho, Wo)
    gxp = np.zeros(xp.shape, dtype=np.result_type(grad_out, params.weight))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += cols[:, :, i, j]
    gx = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    return np.ascontiguousarray(gx), ConvGrads(gw, gb)


def transposed_conv2d_output_shape(in_hw: tuple[int, int], params: ConvParams) -> tuple[int, int]:
    kh, kw = params.weight.shape[2:]
    ph, pw = _pair(params.padding)
    s = params.stride
    return ((in_hw[0] - 1) * s - 2 * ph + kh, (in_hw[1] - 1) * s - 2 * pw + kw)


def _validate_tconv(x: np.ndarray, params: ConvParams) -> tuple[int, int]:
    x = as_tensor4(x)
    in_c, out_c = params.weight.shape[:2]
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {in_c}")
    if params.bias.shape != (out_c,):
        raise ShapeError(f"bias shape {params.bias.shape} != ({out_c},)")
    ho, wo = transposed_conv2d_output_shape(x.shape[2:], params)
    if ho < 1 or wo < 1:
        raise ShapeError(f"transposed conv output would be empty ({ho}x{wo})")
    return ho, wo


def transposed_conv2d(x: Tensor4, params: ConvParams) -> Tensor4:
    """Adjoint of a strided convolution ("deconvolution").

    Each input pixel stamps the kernel onto the output at ``stride`` spacing;
    ``padding`` is then cropped from every border.
    """
    ho, wo = _validate_tconv(x, params)
    n, _, h, w = x.shape
    out_c, kh, kw = params.weight.shape[1:]
    ph, pw = _pair(params.padding)
    s = params.stride
    cols = np.tensordot(x, params.weight, axes=([1], [0]))  # (N, H, W, O, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    full = np.zeros((n, out_c, (h - 1) * s + kh, (w - 1) * s + kw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + s * (h - 1) + 1 : s, j : j + s * (w - 1) + 1 : s] += cols[:, :, i, j]
    y = full[:, :, ph : ph + ho, pw : pw + wo] + params.bias[None, :, None, None]
    return np.ascontiguousarray(y)


def transposed_conv2d_backward(
    x: Tensor4, params: ConvParams, grad_out: Tensor4
) -> tuple[Tensor4, ConvGrads]:
    ho, wo = _validate_tconv(x, params)
    n, _, h, w = x.shape
    out_c, kh, kw = params.weight.shape[1:]
    if grad_out.shape != (n, out_c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output {(n, out_c, ho, wo)}")
    ph, pw = _pair(params.padding)
    s = params.stride
    gfull = np.pad(grad_out, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = _windows(gfull, kh, kw, s, h, w)  # (N, O, H, W, kh, kw)
    gx = np.tensordot(win, params.weight, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, C)
    gw = np.tensordot(x, win, axes=([0, 2, 3], [0, 2, 3]))  # (C, O, kh, kw)
    gb = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), ConvGrads(gw, gb)


def relu(x: Tensor4) -> Tensor4:
    return np.maximum(x, 0)


def relu_backward(x: Tensor4, grad_out: Tensor4) -> Tensor4:
    # subgradient at exactly 0 is 0
    return grad_out * (x > 0)


def sigmoid(x: Tensor4) -> Tensor4:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: Tensor4, grad_out: Tensor4) -> Tensor4:
    """Gradient through the logistic function given its *output* ``y``."""
    return grad_out * y * (1 - y)


def l2_normalize(x: Tensor4, eps: float = 1e-6) -> tuple[Tensor4, np.ndarray]:
    """Unit-length channel vector at every pixel. Returns (output, norms)."""
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True) + eps * eps)
    return x / norm, norm


def l2_normalize_backward(y: Tensor4, norm: np.ndarray, grad_out: Tensor4) -> Tensor4:
    return (grad_out - y * np.sum(y * grad_out, axis=1, keepdims=True)) / norm


@lru_cache(maxsize=64)
def _resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    # half-pixel centres, edge clamped
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Bilinear resampling with the align-corners-false convention."""
    x = as_tensor4(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    ry = _resize_matrix(x.shape[2], out_h).astype(x.dtype, copy=False)
    rx = _resize_matrix(x.shape[3], out_w).astype(x.dtype, copy=False)
    return np.ascontiguousarray(ry @ x @ rx.T)


def bilinear_resize_backward(x_shape: tuple[int, ...], grad_out: Tensor4) -> Tensor4:
    ry = _resize_matrix(x_shape[2], grad_out.shape[2]).astype(grad_out.dtype, copy=False)
    rx = _resize_matrix(x_shape[3], grad_out.shape[3]).astype(grad_out.dtype, copy=False)
    return np.ascontiguousarray(ry.T @ grad_out @ rx)


@dataclass
class AdamState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter and state objects.

    Parameters absent from ``grads`` are carried over untouched (frozen).
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_params: dict[str, np.ndarray] = {}
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_params, new_state


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_input: dict[str, float]


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def finite_diff_check(
    forward: Callable[[dict[str, np.ndarray]], np.ndarray],
    backward: Callable[[dict[str, np.ndarray], np.ndarray], Mapping[str, np.ndarray]],
    inputs: Mapping[str, np.ndarray],
    tolerance: float = 1e-3,
    step: float = 1e-4,
    max_coords: int | None = 40,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    The scalar under test is ``sum(w * forward(inputs))`` for a random
    projection ``w``. ``backward(inputs, w)`` must return the gradient with
    respect to each entry of ``inputs`` (missing keys are skipped). At most
    ``max_coords`` coordinates per input are probed; the relative error is
    ``|a - n| / max(|a|, |n|)`` over the probed coordinates.
    """
    rng = rng or np.random.default_rng(0)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = forward(inputs)
    w = rng.standard_normal(np.shape(out))
    analytic = backward(inputs, w)

    per_input = {}
    for name, arr in inputs.items():
        if name not in analytic:
            continue
        ga = np.asarray(analytic[name], dtype=np.float64)
        flat = arr.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(np.sum(w * forward(inputs)))
            flat[i] = orig - step
            fm = float(np.sum(w * forward(inputs)))
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * step)
        per_input[name] = _rel_err(ga.reshape(-1)[idx], numeric)
    worst = max(per_input.values(), default=0.0)
    return GradCheckReport(worst <= tolerance, worst, per_input)

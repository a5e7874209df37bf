"""Network blocks: shared image encoder, embedding head, mask encoder and the
bottom-up decoder.

Every block is described by a small op table (see ``_Op``) so that one pair
of walkers, :func:`run_ops` and :func:`run_ops_backward`, handles forward and
backward passes for all of them. Parameters live in a flat name -> array
mapping inside :class:`ModelParameters`; names are ``"<block>.<layer>.w|b"``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple

import numpy as np

from .numcore import (
    ConvParams,
    ShapeError,
    as_tensor4,
    bilinear_resize,
    l2_normalize,
    l2_normalize_backward,
    bilinear_resize_backward,
    conv2d,
    conv2d_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)

BLOCKS = ("enc", "emb", "menc", "dec")


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    kernel: int = 3

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("encoder channels and strides must have equal length")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"encoder strides must be 1 or 2, got {self.strides}")
        if self.total_stride not in (16, 32):
            raise ValueError(f"total encoder stride must be 16 or 32, got {self.total_stride}")
        if self.kernel % 2 == 0:
            raise ValueError("encoder kernel size must be odd")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @classmethod
    def for_stride(cls, stride: int) -> "EncoderSpec":
        if stride == 16:
            return cls()
        if stride == 32:
            return cls(channels=(16, 32, 64, 64, 64), strides=(2, 2, 2, 2, 2))
        raise ValueError(f"unsupported total stride {stride}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    embed_dim: int = 32
    mask_channels: int = 64
    gcn_kernel: int = 7
    decoder_width: int = 64
    score_channels: int = 64
    normalize_embedding: bool = True
    # which target-frame features the decoder sees: "encoder" or "embedding"
    decoder_features: str = "encoder"
    bilinear_upsample_init: bool = True
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.gcn_kernel % 2 == 0:
            raise ValueError("global-convolution kernel extent must be odd")
        if self.decoder_features not in ("encoder", "embedding"):
            raise ValueError(f"decoder_features must be 'encoder' or 'embedding', got {self.decoder_features!r}")

    @property
    def decoder_feature_channels(self) -> int:
        return self.encoder.channels[-1] if self.decoder_features == "encoder" else self.embed_dim

    @property
    def stride(self) -> int:
        return self.encoder.total_stride

    @property
    def mask_strides(self) -> tuple[int, ...]:
        # five layers; as many stride-2 layers as needed to land on the matching grid
        n_down = int(round(math.log2(self.stride)))
        return tuple([2] * n_down + [1] * (5 - n_down))

    @property
    def mask_widths(self) -> tuple[int, ...]:
        c = self.mask_channels
        return (max(c // 8, 4), max(c // 4, 8), max(c // 2, 8), c, c)

    @property
    def n_upsample(self) -> int:
        return int(round(math.log2(self.stride))) - 2

    @property
    def up_widths(self) -> tuple[int, ...]:
        dw = self.decoder_width
        widths = (dw, dw * 3 // 4, dw // 2)
        return widths[-self.n_upsample :]

    @property
    def refine_widths(self) -> tuple[int, ...]:
        # stride-1 convs at 1/4 scale; together with the upsampling stages they
        # make five trunk layers, the last one emitting the score map
        n = 5 - self.n_upsample
        return tuple([self.decoder_width // 2] * (n - 1) + [self.score_channels])

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["encoder"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", None)
        encoder = EncoderSpec() if enc is None else EncoderSpec(
            channels=tuple(enc["channels"]), strides=tuple(enc["strides"]), kernel=int(enc["kernel"])
        )
        return cls(encoder=encoder, **d)


class _Op(NamedTuple):
    kind: str  # conv | tconv | relu | l2norm | res | gcn
    name: str = ""
    stride: int = 1
    padding: Any = 0
    branches: tuple = ()


def _relu():
    return _Op("relu")


def _block_ops(cfg: ModelConfig) -> dict[str, list[_Op]]:
    k = cfg.encoder.kernel
    enc = []
    for i, s in enumerate(cfg.encoder.strides):
        enc += [_Op("conv", f"enc.c{i}", s, k // 2), _relu()]

    emb = [_Op("conv", "emb.c0", 1, 1), _relu(), _Op("conv", "emb.c1", 1, 1)]
    if cfg.normalize_embedding:
        emb.append(_Op("l2norm"))

    menc = []
    for i, s in enumerate(cfg.mask_strides):
        menc.append(_Op("conv", f"menc.c{i}", s, 1))
        if i < 4:
            menc.append(_relu())

    g = cfg.gcn_kernel // 2
    gcn = _Op(
        "gcn",
        "dec.gcn",
        branches=(
            (_Op("conv", "dec.gcn.a0", 1, (g, 0)), _Op("conv", "dec.gcn.a1", 1, (0, g))),
            (_Op("conv", "dec.gcn.b0", 1, (0, g)), _Op("conv", "dec.gcn.b1", 1, (g, 0))),
        ),
    )
    dec = [gcn, _relu()]
    for i in range(cfg.n_upsample):
        dec += [
            _Op("tconv", f"dec.up{i}", 2, 1),
            _relu(),
            _Op("res", f"dec.br{i}", branches=((_Op("conv", f"dec.br{i}.c0", 1, 1), _relu(), _Op("conv", f"dec.br{i}.c1", 1, 1)),)),
        ]
    for i in range(len(cfg.refine_widths)):
        dec += [_Op("conv", f"dec.ref{i}", 1, 1), _relu()]
    dec.append(_Op("res", "dec.br_score", branches=((_Op("conv", "dec.br_score.c0", 1, 1), _relu(), _Op("conv", "dec.br_score.c1", 1, 1)),)))
    dec.append(_Op("conv", "dec.head", 1, 0))
    return {"enc": enc, "emb": emb, "menc": menc, "dec": dec}


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(weight-name, weight-shape, init-kind) for every layer, in a fixed order."""
    k = cfg.encoder.kernel
    shapes = []
    c_in = 3
    for i, c in enumerate(cfg.encoder.channels):
        shapes.append((f"enc.c{i}", (c, c_in, k, k), "he"))
        c_in = c
    e = cfg.embed_dim
    shapes.append(("emb.c0", (e, c_in, 3, 3), "he"))
    shapes.append(("emb.c1", (e, e, 3, 3), "lin"))
    m_in = 1
    for i, c in enumerate(cfg.mask_widths):
        shapes.append((f"menc.c{i}", (c, m_in, 3, 3), "he" if i < 4 else "lin"))
        m_in = c
    gk, gc = cfg.gcn_kernel, cfg.decoder_width
    d_in = cfg.decoder_feature_channels + cfg.mask_channels
    shapes += [
        ("dec.gcn.a0", (gc, d_in, gk, 1), "lin"),
        ("dec.gcn.a1", (gc, gc, 1, gk), "he"),
        ("dec.gcn.b0", (gc, d_in, 1, gk), "lin"),
        ("dec.gcn.b1", (gc, gc, gk, 1), "he"),
    ]
    c_prev = gc
    for i, c in enumerate(cfg.up_widths):
        shapes.append((f"dec.up{i}", (c_prev, c, 4, 4), "tconv"))
        shapes.append((f"dec.br{i}.c0", (c, c, 3, 3), "he"))
        shapes.append((f"dec.br{i}.c1", (c, c, 3, 3), "res"))
        c_prev = c
    for i, c in enumerate(cfg.refine_widths):
        shapes.append((f"dec.ref{i}", (c, c_prev, 3, 3), "he"))
        c_prev = c
    shapes.append(("dec.br_score.c0", (c_prev, c_prev, 3, 3), "he"))
    shapes.append(("dec.br_score.c1", (c_prev, c_prev, 3, 3), "res"))
    shapes.append(("dec.head", (1, c_prev, 1, 1), "head"))
    return shapes


@dataclass
class ModelParameters:
    """All trainable tensors of the network plus its configuration."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        check_grid_coincidence(self.config)

    @property
    def stride(self) -> int:
        return self.config.stride

    def conv(self, name: str, stride: int = 1, padding=0) -> ConvParams:
        return ConvParams(self.tensors[name + ".w"], self.tensors[name + ".b"], stride, padding)

    def trainable_names(self) -> list[str]:
        skip = ("enc.",) if self.config.freeze_encoder else ()
        return [n for n in self.tensors if not n.startswith(skip)] if skip else list(self.tensors)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, tensors: dict[str, np.ndarray]) -> "ModelParameters":
        return ModelParameters(self.config, tensors)


def check_grid_coincidence(cfg: ModelConfig) -> None:
    if math.prod(cfg.mask_strides) != cfg.stride:
        raise ShapeError(
            f"mask encoder stride {math.prod(cfg.mask_strides)} != image encoder stride {cfg.stride}"
        )


def _bilinear_kernel(k: int) -> np.ndarray:
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    og = np.arange(k)
    f = 1 - np.abs(og - center) / factor
    return np.outer(f, f)


def init_params(cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> ModelParameters:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape, kind in _layer_shapes(cfg):
        if kind == "tconv":
            fan_in = shape[0] * shape[2] * shape[3] / 4  # stride-2: each output sees k*k/4 taps
        else:
            fan_in = shape[1] * shape[2] * shape[3]
        gain = {"he": 2.0, "lin": 1.0, "tconv": 2.0, "res": 0.5, "head": 1.0}[kind]
        w = rng.standard_normal(shape) * math.sqrt(gain / fan_in)
        if kind == "tconv" and cfg.bilinear_upsample_init:
            w = 0.1 * w
            n = min(shape[0], shape[1])
            w[np.arange(n), np.arange(n)] += _bilinear_kernel(shape[2])
        out_c = shape[1] if kind == "tconv" else shape[0]
        tensors[name + ".w"] = w.astype(dtype)
        tensors[name + ".b"] = np.zeros(out_c, dtype=dtype)
    return ModelParameters(cfg, tensors)


# -- op walkers --------------------------------------------------------------


def run_ops(ops: list[_Op], params: ModelParameters, x: np.ndarray) -> tuple[np.ndarray, list]:
    caches = []
    for op in ops:
        if op.kind == "conv":
            y = conv2d(x, params.conv(op.name, op.stride, op.padding))
            caches.append(x)
        elif op.kind == "tconv":
            y = transposed_conv2d(x, params.conv(op.name, op.stride, op.padding))
            caches.append(x)
        elif op.kind == "relu":
            y = relu(x)
            caches.append(x)
        elif op.kind == "l2norm":
            y, norm = l2_normalize(x)
            caches.append((y, norm))
        elif op.kind == "res":
            r, sub = run_ops(list(op.branches[0]), params, x)
            y = x + r
            caches.append(sub)
        elif op.kind == "gcn":
            subs = []
            y = 0
            for branch in op.branches:
                r, sub = run_ops(list(branch), params, x)
                y = y + r
                subs.append(sub)
            caches.append(subs)
        else:
            raise ValueError(f"unknown op kind {op.kind!r}")
        x = y
    return x, caches


def run_ops_backward(
    ops: list[_Op], params: ModelParameters, caches: list, grad: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Backpropagate ``grad`` through ``ops``; parameter gradients accumulate into ``grads``."""
    for op, cache in zip(reversed(ops), reversed(caches)):
        if op.kind in ("conv", "tconv"):
            p = params.conv(op.name, op.stride, op.padding)
            back = conv2d_backward if op.kind == "conv" else transposed_conv2d_backward
            grad, g = back(cache, p, grad)
            _accum(grads, op.name + ".w", g.weight)
            _accum(grads, op.name + ".b", g.bias)
        elif op.kind == "relu":
            grad = relu_backward(cache, grad)
        elif op.kind == "l2norm":
            grad = l2_normalize_backward(*cache, grad)
        elif op.kind == "res":
            grad = grad + run_ops_backward(list(op.branches[0]), params, cache, grad, grads)
        elif op.kind == "gcn":
            total = 0
            for branch, sub in zip(op.branches, cache):
                total = total + run_ops_backward(list(branch), params, sub, grad, grads)
            grad = total
    return grad


def _accum(grads: dict[str, np.ndarray], name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


_OPS_CACHE: dict[ModelConfig, dict[str, list[_Op]]] = {}


def block_ops(cfg: ModelConfig) -> dict[str, list[_Op]]:
    ops = _OPS_CACHE.get(cfg)
    if ops is None:
        ops = _OPS_CACHE[cfg] = _block_ops(cfg)
    return ops


# -- public blocks -----------------------------------------------------------


def _check_divisible(x: np.ndarray, stride: int, what: str) -> None:
    h, w = x.shape[2:]
    if h % stride or w % stride:
        raise ShapeError(f"{what} size {h}x{w} is not divisible by the total stride {stride}")


def encode_image_fwd(frame: np.ndarray, params: ModelParameters):
    frame = as_tensor4(frame)
    if frame.shape[1] != 3:
        raise ShapeError(f"frames must have 3 channels, got {frame.shape[1]}")
    _check_divisible(frame, params.stride, "frame")
    return run_ops(block_ops(params.config)["enc"], params, frame)


def encode_image(frame: np.ndarray, params: ModelParameters) -> np.ndarray:
    """Siamese image encoder: the same weights serve reference and target frames."""
    return encode_image_fwd(frame, params)[0]


def embed_fwd(features: np.ndarray, params: ModelParameters):
    return run_ops(block_ops(params.config)["emb"], params, as_tensor4(features))


def embed(features: np.ndarray, params: ModelParameters) -> np.ndarray:
    return embed_fwd(features, params)[0]


def encode_mask_fwd(mask: np.ndarray, params: ModelParameters):
    mask = as_tensor4(mask)
    if mask.shape[1] != 1:
        raise ShapeError(f"masks must have a single channel, got {mask.shape[1]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (values 0 or 1)")
    _check_divisible(mask, params.stride, "mask")
    return run_ops(block_ops(params.config)["menc"], params, mask.astype(params.tensors["menc.c0.w"].dtype))


def encode_mask(mask: np.ndarray, params: ModelParameters) -> np.ndarray:
    return encode_mask_fwd(mask, params)[0]


def decode_fwd(target_features: np.ndarray, warped_mask: np.ndarray, params: ModelParameters, out_hw=None):
    target_features = as_tensor4(target_features)
    warped_mask = as_tensor4(warped_mask)
    if target_features.shape[0] != warped_mask.shape[0] or target_features.shape[2:] != warped_mask.shape[2:]:
        raise ShapeError(
            f"decoder inputs on different grids: {target_features.shape} vs {warped_mask.shape}"
        )
    if out_hw is None:
        out_hw = (target_features.shape[2] * params.stride, target_features.shape[3] * params.stride)
    x = np.concatenate([target_features, warped_mask], axis=1)
    logits, caches = run_ops(block_ops(params.config)["dec"], params, x)
    prob_small = sigmoid(logits)
    prob = bilinear_resize(prob_small, *out_hw)
    cache = (caches, prob_small, target_features.shape[1])
    return prob, cache


def decode(target_features, warped_mask, params: ModelParameters, out_hw=None) -> np.ndarray:
    """Bottom-up decoder; returns a foreground probability map at full frame size."""
    return decode_fwd(target_features, warped_mask, params, out_hw)[0]


def decode_backward(cache, grad_prob: np.ndarray, params: ModelParameters, grads: dict[str, np.ndarray]):
    caches, prob_small, n_feat = cache
    g = bilinear_resize_backward(prob_small.shape, grad_prob)
    g = sigmoid_backward(prob_small, g)
    gx = run_ops_backward(block_ops(params.config)["dec"], params, caches, g, grads)
    return gx[:, :n_feat], gx[:, n_feat:]


def block_backward(block: str, caches, grad: np.ndarray, params: ModelParameters, grads: dict[str, np.ndarray]):
    return run_ops_backward(block_ops(params.config)[block], params, caches, grad, grads)

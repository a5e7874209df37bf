"""Binary PPM/PGM images, sequence directories, model files and JSON configs.

Sequence layout::

    <seq>/frames/00000.ppm, 00001.ppm, ...
    <seq>/masks/00000.pgm              reference labels (0 = background)
    <seq>/masks/NNNNN.pgm              optional ground truth

Model file layout: ``b"MTN1"``, a little-endian uint32 header length, a UTF-8
JSON header, then every tensor as little-endian float32 in header order.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .netblocks import EncoderSpec, ModelConfig, ModelParameters
from .pipeline.config import TrainConfig

MODEL_MAGIC = b"MTN1"
MODEL_FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed file. ``offset`` is a byte offset (binary files) or line number (text)."""

    def __init__(self, path, message: str, offset: int | None = None, unit: str = "byte"):
        self.path = str(path)
        self.offset = offset
        where = f" at {unit} {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {message}")


class ValidationError(ValueError):
    """Data that parses correctly but violates a sequence or config invariant."""


# -- netpbm -------------------------------------------------------------------

_WS = b" \t\r\n\x0b\x0c"


def _read_header(data: bytes, path, magic: bytes) -> tuple[int, int, int, int]:
    """Parse ``magic width height maxval``; returns those plus the payload offset."""
    if data[:2] != magic:
        raise FormatError(path, f"bad magic {data[:2]!r}, expected {magic!r}", 0)
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < len(data) and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        token = data[start:pos]
        if not token:
            raise FormatError(path, "truncated header", start)
        if not token.isdigit():
            raise FormatError(path, f"expected a decimal integer, got {token[:16]!r}", start)
        values.append((int(token), start))
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError(path, "missing whitespace after maxval", pos)
    (width, _), (height, hpos), (maxval, mpos) = values
    if width < 1 or height < 1:
        raise FormatError(path, f"invalid size {width}x{height}", hpos)
    if maxval != 255:
        raise FormatError(path, f"unsupported maxval {maxval} (only 255)", mpos)
    return width, height, maxval, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    width, height, _, offset = _read_header(data, path, magic)
    need = width * height * channels
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise FormatError(path, f"truncated payload: {len(payload)} of {need} bytes", offset + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width, channels) if channels > 1 else arr.reshape(height, width)


def _write_netpbm(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (H, W, 3) float32 in [0, 1]."""
    return _read_netpbm(path, b"P6", 3).astype(np.float32) / np.float32(255)


def write_ppm(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
    q = np.clip(np.rint(image.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    _write_netpbm(path, b"P6", q)


def read_pgm(path) -> np.ndarray:
    """Binary P5 -> (H, W) uint8 label map."""
    return _read_netpbm(path, b"P5", 1).copy()


def write_pgm(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected an (H, W) label map, got {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise ValueError("labels must lie in 0..255")
    _write_netpbm(path, b"P5", mask.astype(np.uint8))


# -- sequences ----------------------------------------------------------------


@dataclass
class SequenceBundle:
    frames: list[np.ndarray]
    reference_mask: np.ndarray
    n_objects: int
    frame_ids: list[int]
    gt_masks: dict[int, np.ndarray] = field(default_factory=dict)  # keyed by frame position
    name: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValidationError("a sequence needs at least one frame")
        size = self.frames[0].shape[:2]
        for i, f in enumerate(self.frames):
            if f.shape[:2] != size:
                raise ValidationError(f"frame {self.frame_ids[i]} is {f.shape[:2]}, expected {size}")
        if self.reference_mask.shape != size:
            raise ValidationError(f"reference mask is {self.reference_mask.shape}, frames are {size}")
        for i, m in self.gt_masks.items():
            if m.shape != size:
                raise ValidationError(f"mask {self.frame_ids[i]} is {m.shape}, frames are {size}")
            if m.size and int(m.max()) > self.n_objects:
                raise ValidationError(
                    f"mask {self.frame_ids[i]} has label {int(m.max())} > object count {self.n_objects}"
                )


def _numbered(directory: Path, suffix: str) -> list[tuple[int, Path]]:
    out = []
    for p in directory.iterdir():
        if p.suffix == suffix and p.stem.isdigit():
            out.append((int(p.stem), p))
    return sorted(out)


def load_sequence(directory) -> SequenceBundle:
    directory = Path(directory)
    frames_dir = directory / "frames"
    masks_dir = directory / "masks"
    if not frames_dir.is_dir():
        raise ValidationError(f"{frames_dir}: missing frames directory")
    numbered = _numbered(frames_dir, ".ppm")
    if not numbered:
        raise ValidationError(f"{frames_dir}: no NNNNN.ppm frames")
    ref_path = masks_dir / "00000.pgm"
    if not ref_path.is_file():
        raise ValidationError(f"{ref_path}: missing reference mask")
    ids = [i for i, _ in numbered]
    frames = [read_ppm(p) for _, p in numbered]
    reference = read_pgm(ref_path)
    n_objects = int(reference.max()) if reference.size else 0
    gts = {}
    position = {fid: k for k, fid in enumerate(ids)}
    if masks_dir.is_dir():
        for fid, p in _numbered(masks_dir, ".pgm"):
            if fid in position and position[fid] != 0:
                gts[position[fid]] = read_pgm(p)
    return SequenceBundle(frames, reference, n_objects, ids, gts, directory.name)


def write_sequence(directory, frames, masks: dict[int, np.ndarray]) -> None:
    """Write frames (and masks keyed by frame index) in the sequence layout."""
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_ppm(f, directory / "frames" / f"{i:05d}.ppm")
    for i, m in masks.items():
        write_pgm(m, directory / "masks" / f"{i:05d}.pgm")


# -- model files --------------------------------------------------------------


def save_model(params: ModelParameters, path) -> None:
    names = list(params.tensors)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
        "param_count": int(params.parameter_count()),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes())


def load_model(path) -> ModelParameters:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError(path, f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    if len(data) < 8:
        raise FormatError(path, "truncated header length", 4)
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise FormatError(path, f"header length {hlen} exceeds file size", 4)
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(path, f"unreadable header: {exc}", 8) from exc
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(path, f"unsupported format version {version!r}", 8)
    specs = header["tensors"]
    count = sum(int(np.prod(shape)) for _, shape in specs)
    if count != header.get("param_count"):
        raise FormatError(path, f"tensor shapes give {count} values, header declares {header.get('param_count')}", 8)
    payload = memoryview(data)[8 + hlen :]
    if len(payload) != count * 4:
        raise FormatError(path, f"payload is {len(payload)} bytes, expected {count * 4}", 8 + hlen)
    flat = np.frombuffer(payload, dtype="<f4")
    tensors, pos = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape))
        tensors[name] = flat[pos : pos + n].astype(np.float32).reshape(shape)
        pos += n
    config = ModelConfig.from_dict(header["config"])
    return ModelParameters(config, tensors)


# -- configuration ------------------------------------------------------------

MODEL_KEYS = {
    "stride",
    "encoder_channels",
    "embed_dim",
    "mask_channels",
    "gcn_kernel",
    "decoder_width",
    "score_channels",
    "normalize_embedding",
    "decoder_features",
    "bilinear_upsample_init",
    "freeze_encoder",
}


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(value: Any, like: Any, key: str, path, text: str):
    if isinstance(like, bool):
        ok = isinstance(value, bool)
    elif isinstance(like, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(like, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(like, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise FormatError(path, f"key {key!r} expects {type(like).__name__}, got {value!r}", _key_line(text, key), "line")
    return value


def config_from_dict(doc: dict[str, Any], path="<config>", text: str = "") -> tuple[TrainConfig, ModelConfig]:
    train_defaults = TrainConfig()
    train_kw: dict[str, Any] = {}
    model_kw: dict[str, Any] = {}
    for key, value in doc.items():
        if key in TrainConfig.field_names():
            train_kw[key] = _coerce(value, getattr(train_defaults, key), key, path, text)
        elif key in MODEL_KEYS:
            model_kw[key] = value
        else:
            raise FormatError(path, f"unknown key {key!r}", _key_line(text, key), "line")

    stride = model_kw.pop("stride", 16)
    channels = model_kw.pop("encoder_channels", None)
    try:
        encoder = EncoderSpec.for_stride(stride)
        if channels is not None:
            encoder = EncoderSpec(tuple(channels), encoder.strides, encoder.kernel)
        model_defaults = ModelConfig()
        for k, v in model_kw.items():
            model_kw[k] = _coerce(v, getattr(model_defaults, k), k, path, text)
        model = ModelConfig(encoder=encoder, **model_kw)
        train_cfg = TrainConfig(**train_kw).validate(model.stride)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise ValidationError(f"{path}: {exc}") from exc
    return train_cfg, model


def parse_config(path) -> tuple[TrainConfig, ModelConfig]:
    """Flat JSON object of settings; absent keys take their defaults."""
    text = Path(path).read_text()
    if not text.strip():
        doc = {}
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(path, exc.msg, exc.lineno, "line") from exc
    if not isinstance(doc, dict):
        raise FormatError(path, "top level must be an object", 1, "line")
    return config_from_dict(doc, path, text)

"""Per-frame inference on image arrays, multi-object aware."""

from __future__ import annotations

import numpy as np

from ..netblocks import ModelParameters
from .losses import ObjectProbabilitySet, fuse_multi_object
from .model import forward


def image_to_tensor(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (1, 3, H, W)."""
    return np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)[None])


def mask_to_tensor(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask)[None, None]


def _pad_to(x: np.ndarray, stride: int) -> np.ndarray:
    h, w = x.shape[2:]
    ph = (-h) % stride
    pw = (-w) % stride
    if not ph and not pw:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")


def object_probabilities(
    ref_image: np.ndarray,
    ref_labels: np.ndarray,
    tgt_image: np.ndarray,
    params: ModelParameters,
    n_objects: int,
    warp: str = "scatter",
) -> ObjectProbabilitySet:
    """Independent forward pass per object label 1..n_objects.

    Frames whose size is not a multiple of the model stride are edge-padded and
    the result cropped back.
    """
    h, w = ref_labels.shape
    s = params.stride
    ref = _pad_to(image_to_tensor(ref_image), s)
    tgt = _pad_to(image_to_tensor(tgt_image), s)
    maps = []
    for label in range(1, n_objects + 1):
        m = np.pad(
            (ref_labels == label).astype(np.float32),
            ((0, ref.shape[2] - h), (0, ref.shape[3] - w)),
        )
        prob = forward(ref, mask_to_tensor(m), tgt, params, warp=warp)
        maps.append(prob[0, 0, :h, :w])
    return ObjectProbabilitySet(np.clip(np.stack(maps), 0.0, 1.0))


def segment_frame(ref_image, ref_labels, tgt_image, params: ModelParameters, n_objects: int, warp: str = "scatter") -> np.ndarray:
    return fuse_multi_object(object_probabilities(ref_image, ref_labels, tgt_image, params, n_objects, warp))


def segment_sequence(bundle, params: ModelParameters, warp: str = "scatter") -> list[np.ndarray]:
    """Label maps for every frame; frame 0 is the given reference mask."""
    ref_image = bundle.frames[0]
    ref_labels = bundle.reference_mask
    out = [ref_labels.astype(np.uint8)]
    for frame in bundle.frames[1:]:
        out.append(segment_frame(ref_image, ref_labels, frame, params, bundle.n_objects, warp))
    return out

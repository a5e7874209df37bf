"""Dice loss and multi-object fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _check_pair(p: np.ndarray, g: np.ndarray) -> None:
    if np.shape(p) != np.shape(g):
        raise ValueError(f"prediction shape {np.shape(p)} != ground truth shape {np.shape(g)}")


def dice_loss(p: np.ndarray, g: np.ndarray, eps: float = 1.0) -> float:
    """``1 - (2*sum(g*p) + eps) / (sum(g^2) + sum(p^2) + eps)``."""
    _check_pair(p, g)
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    num = 2.0 * np.sum(g * p) + eps
    den = np.sum(g * g) + np.sum(p * p) + eps
    return float(1.0 - num / den)


def dice_loss_backward(p: np.ndarray, g: np.ndarray, eps: float = 1.0) -> np.ndarray:
    _check_pair(p, g)
    p64 = np.asarray(p, dtype=np.float64)
    g64 = np.asarray(g, dtype=np.float64)
    num = 2.0 * np.sum(g64 * p64) + eps
    den = np.sum(g64 * g64) + np.sum(p64 * p64) + eps
    grad = (2.0 * p64 * num - 2.0 * g64 * den) / (den * den)
    return grad.astype(np.result_type(p, np.float32), copy=False)


@dataclass
class ObjectProbabilitySet:
    """Per-object foreground maps stacked as (M, H, W)."""

    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise ValueError(f"expected (M, H, W) probability maps, got {self.maps.shape}")
        if self.maps.shape[0] == 0:
            raise ValueError("at least one object is required")
        if np.any(self.maps < 0) or np.any(self.maps > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def M(self) -> int:
        return self.maps.shape[0]

    @property
    def background(self) -> np.ndarray:
        return 1.0 - self.maps.sum(axis=0) / self.M


def fuse_multi_object(prob_set: ObjectProbabilitySet | np.ndarray) -> np.ndarray:
    """Label map in 0..M: argmax over background and per-object probabilities.

    Ties go to the lower label.
    """
    if not isinstance(prob_set, ObjectProbabilitySet):
        prob_set = ObjectProbabilitySet(prob_set)
    stacked = np.concatenate([prob_set.background[None], prob_set.maps], axis=0)
    return np.argmax(stacked, axis=0).astype(np.uint8 if prob_set.M < 256 else np.int32)

"""Image-only training loop: every step turns one still image into a frame
pair and fits the mask transfer between the two views."""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from ..netblocks import ModelConfig, ModelParameters, init_params
from ..numcore import AdamState, adam_step
from .config import TrainConfig
from .data import TrainingSample, synthesize_pair
from .losses import dice_loss, dice_loss_backward
from .model import backward_train, forward_train

log = logging.getLogger(__name__)


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


def train(
    samples: Sequence[TrainingSample],
    cfg: TrainConfig,
    params: ModelParameters | None = None,
    model_config: ModelConfig | None = None,
    lr: float | None = None,
    iterations: int | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[ModelParameters, list[float]]:
    """Train with Adam on pairs synthesized from ``samples``.

    ``lr`` / ``iterations`` override the config (used for the fine-tune stage).
    Returns the final parameters and the per-iteration loss trace.
    """
    if not samples:
        raise ValueError("train() needs at least one sample")
    dtype = np.dtype(cfg.precision)
    if params is None:
        params = init_params(model_config or ModelConfig(), seed=cfg.seed, dtype=dtype)
    else:
        params = params.astype(dtype)
    cfg.validate(params.stride)
    lr = cfg.lr if lr is None else lr
    iterations = cfg.iterations if iterations is None else iterations

    rng = np.random.default_rng(cfg.seed)
    trainable = params.trainable_names()
    state = AdamState.for_params({k: params.tensors[k] for k in trainable}, lr=lr)
    losses: list[float] = []
    for it in range(iterations):
        sample = samples[int(rng.integers(len(samples)))]
        ref, tgt = synthesize_pair(sample, rng, cfg)
        prob, cache = forward_train(ref.image, ref.mask, tgt.image, params, warp=cfg.warp, window=cfg.window)
        loss = dice_loss(prob, tgt.mask, cfg.dice_eps)
        if not math.isfinite(loss):
            raise NumericFailure(f"non-finite loss {loss} at iteration {it}")
        grad = dice_loss_backward(prob, tgt.mask, cfg.dice_eps).astype(dtype)
        grads = backward_train(cache, grad, params, cfg.soft_match_grad, cfg.soft_temperature)
        try:
            new, state = adam_step({k: params.tensors[k] for k in trainable}, grads, state)
        except FloatingPointError as exc:
            raise NumericFailure(f"iteration {it}: {exc}") from exc
        params = params.replace({**params.tensors, **new})
        losses.append(loss)
        if callback is not None:
            callback(it, loss)
        if (it + 1) % 100 == 0:
            log.info("iter %d  loss %.4f  (mean of last 100: %.4f)", it + 1, loss, float(np.mean(losses[-100:])))
    return params, losses


def fine_tune(samples: Sequence[TrainingSample], cfg: TrainConfig, params: ModelParameters):
    """Second stage on another sample pool at the fine-tune learning rate."""
    return train(samples, cfg, params=params, lr=cfg.fine_tune_lr, iterations=cfg.fine_tune_iterations)

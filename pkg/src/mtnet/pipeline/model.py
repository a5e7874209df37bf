"""Full mask-transfer forward pass and its gradient routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..matching import (
    apply_routing,
    apply_routing_backward,
    decode_displacement,
    gather_routing,
    global_correlation,
    scatter_routing,
    soft_match_backward,
)
from ..netblocks import (
    ModelParameters,
    block_backward,
    decode_backward,
    decode_fwd,
    embed_fwd,
    encode_image_fwd,
    encode_mask_fwd,
)
from ..numcore import ShapeError, as_tensor4

WARP_MODES = ("scatter", "gather")


@dataclass
class ForwardCache:
    enc_ref: list
    enc_tgt: list
    emb_ref: list
    emb_tgt: list
    menc: list
    dec: tuple
    routing: object
    e_ref: np.ndarray
    e_tgt: np.ndarray
    mask_features: np.ndarray


def _check_inputs(ref_frame, ref_mask, tgt_frame):
    ref_frame = as_tensor4(ref_frame)
    tgt_frame = as_tensor4(tgt_frame)
    ref_mask = as_tensor4(ref_mask)
    if ref_frame.shape != tgt_frame.shape:
        raise ShapeError(f"reference {ref_frame.shape} and target {tgt_frame.shape} frames differ in size")
    if ref_mask.shape[2:] != ref_frame.shape[2:] or ref_mask.shape[0] != ref_frame.shape[0]:
        raise ShapeError(f"reference mask {ref_mask.shape} does not match frame {ref_frame.shape}")
    return ref_frame, ref_mask, tgt_frame


def forward_train(
    ref_frame,
    ref_mask,
    tgt_frame,
    params: ModelParameters,
    warp: str = "scatter",
    window: int = 0,
    workers: int = 1,
) -> tuple[np.ndarray, ForwardCache]:
    if warp not in WARP_MODES:
        raise ValueError(f"warp must be one of {WARP_MODES}, got {warp!r}")
    ref_frame, ref_mask, tgt_frame = _check_inputs(ref_frame, ref_mask, tgt_frame)
    dtype = params.tensors["enc.c0.w"].dtype
    ref_frame = ref_frame.astype(dtype, copy=False)
    tgt_frame = tgt_frame.astype(dtype, copy=False)

    f_ref, c_enc_ref = encode_image_fwd(ref_frame, params)
    f_tgt, c_enc_tgt = encode_image_fwd(tgt_frame, params)
    e_ref, c_emb_ref = embed_fwd(f_ref, params)
    e_tgt, c_emb_tgt = embed_fwd(f_tgt, params)

    volume = global_correlation(e_ref, e_tgt, window=window, workers=workers)
    if warp == "scatter":
        routing = scatter_routing(decode_displacement(volume))
    else:
        routing = gather_routing(volume)

    m_feat, c_menc = encode_mask_fwd(ref_mask, params)
    if m_feat.shape[2:] != e_ref.shape[2:]:
        raise ShapeError(f"mask grid {m_feat.shape[2:]} != embedding grid {e_ref.shape[2:]}")
    warped = apply_routing(m_feat, routing)
    dec_in = f_tgt if params.config.decoder_features == "encoder" else e_tgt
    prob, c_dec = decode_fwd(dec_in, warped, params, out_hw=ref_frame.shape[2:])
    cache = ForwardCache(c_enc_ref, c_enc_tgt, c_emb_ref, c_emb_tgt, c_menc, c_dec, routing, e_ref, e_tgt, m_feat)
    return prob, cache


def forward(ref_frame, ref_mask, tgt_frame, params: ModelParameters, warp: str = "scatter", window: int = 0, workers: int = 1) -> np.ndarray:
    """Foreground probability of the reference object in the target frame.

    Only the reference frame and mask are consulted; no state is carried
    between target frames.
    """
    return forward_train(ref_frame, ref_mask, tgt_frame, params, warp, window, workers)[0]


def backward_train(
    cache: ForwardCache,
    grad_prob: np.ndarray,
    params: ModelParameters,
    soft_match_grad: bool = False,
    soft_temperature: float = 1.0,
) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(prob).

    Matching is treated as a fixed routing: the mask encoder is reached through
    the value copy of the warp and the target branch through the decoder's
    image-feature input. With ``soft_match_grad`` a softmax relaxation of the
    matching also feeds both embedding branches; without it, and with the
    decoder reading encoder features, the embedding receives no gradient.
    """
    grads: dict[str, np.ndarray] = {}
    g_dec_feat, g_warped = decode_backward(cache.dec, grad_prob, params, grads)
    g_mfeat = apply_routing_backward(g_warped, cache.routing)
    block_backward("menc", cache.menc, g_mfeat, params, grads)

    from_encoder = params.config.decoder_features == "encoder"
    g_emb_tgt = None if from_encoder else g_dec_feat
    g_emb_ref = None
    if soft_match_grad:
        s_ref, s_tgt = soft_match_backward(cache.e_ref, cache.e_tgt, cache.mask_features, g_warped, soft_temperature)
        g_emb_tgt = s_tgt if g_emb_tgt is None else g_emb_tgt + s_tgt
        g_emb_ref = s_ref

    train_encoder = not params.config.freeze_encoder
    g_f_tgt = g_dec_feat if from_encoder else 0
    if g_emb_tgt is not None:
        g_f_tgt = g_f_tgt + block_backward("emb", cache.emb_tgt, g_emb_tgt, params, grads)
    if train_encoder:
        block_backward("enc", cache.enc_tgt, g_f_tgt, params, grads)
    if g_emb_ref is not None:
        g_f_ref = block_backward("emb", cache.emb_ref, g_emb_ref, params, grads)
        if train_encoder:
            block_backward("enc", cache.enc_ref, g_f_ref, params, grads)
    return grads

"""Shared oracles for the test-suite."""

import numpy as np

from mtnet.netblocks import block_ops, decode_backward, decode_fwd, run_ops, run_ops_backward
from mtnet.numcore import finite_diff_check


def _with(params, d):
    return params.replace({**params.tensors, **{k: v for k, v in d.items() if k in params.tensors}})


def block_gradcheck(params, block, x, names, rng, max_coords=20, step=1e-4):
    """Finite-difference check of one op-table block w.r.t. its input and the named tensors."""
    ops = block_ops(params.config)[block]
    inputs = {"x": x, **{n: params.tensors[n] for n in names}}

    def fwd(d):
        return run_ops(ops, _with(params, d), d["x"])[0]

    def bwd(d, g):
        p = _with(params, d)
        _, caches = run_ops(ops, p, d["x"])
        grads = {}
        gx = run_ops_backward(ops, p, caches, g, grads)
        return {"x": gx, **{n: grads[n] for n in names}}

    return finite_diff_check(fwd, bwd, inputs, step=step, max_coords=max_coords, rng=rng)


def decoder_gradcheck(params, feat, warped, names, rng, out_hw=None, max_coords=20, step=1e-4):
    """End-to-end check of the decoder including sigmoid and the final resize."""
    inputs = {"feat": feat, "warped": warped, **{n: params.tensors[n] for n in names}}

    def fwd(d):
        return decode_fwd(d["feat"], d["warped"], _with(params, d), out_hw)[0]

    def bwd(d, g):
        p = _with(params, d)
        _, cache = decode_fwd(d["feat"], d["warped"], p, out_hw)
        grads = {}
        gf, gw = decode_backward(cache, g, p, grads)
        return {"feat": gf, "warped": gw, **{n: grads[n] for n in names}}

    return finite_diff_check(fwd, bwd, inputs, step=step, max_coords=max_coords, rng=rng)


def block_tensor_names(params, block):
    return [n for n in params.tensors if n.startswith(block + ".")]


def naive_global_correlation(er, et):
    """(h, w, D*D) volume by explicit loops over reference pixels and displacements."""
    c, h, w = er.shape
    d_m = max(h, w)
    D = 2 * d_m + 1
    vol = np.full((h, w, D * D), np.finfo(np.result_type(er, et)).min, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for dy in range(-d_m, d_m + 1):
                for dx in range(-d_m, d_m + 1):
                    ty, tx = y + dy, x + dx
                    if 0 <= ty < h and 0 <= tx < w:
                        vol[y, x, (dy + d_m) * D + (dx + d_m)] = sum(
                            float(er[k, y, x]) * float(et[k, ty, tx]) for k in range(c)
                        )
    return vol


def brute_force_argmax(scores, d_m):
    """Best (dx, dy) per pixel scanning offsets in row-major order, first maximum kept."""
    h, w, _ = scores.shape
    D = 2 * d_m + 1
    dxs = np.zeros((h, w), dtype=int)
    dys = np.zeros((h, w), dtype=int)
    for y in range(h):
        for x in range(w):
            best = None
            for dy in range(-d_m, d_m + 1):
                for dx in range(-d_m, d_m + 1):
                    s = scores[y, x, (dy + d_m) * D + (dx + d_m)]
                    if best is None or s > best:
                        best, dxs[y, x], dys[y, x] = s, dx, dy
    return dxs, dys


def random_volume(rng, h, w, dtype=np.float32, ties=False):
    """Random valid correlation volume (sentinels exactly on out-of-frame slots)."""
    d_m = max(h, w)
    D = 2 * d_m + 1
    if ties:
        s = rng.integers(0, 3, (h, w, D * D)).astype(dtype)
    else:
        s = rng.standard_normal((h, w, D * D)).astype(dtype)
    ys, xs = np.mgrid[0:h, 0:w]
    for k in range(D * D):
        dy, dx = divmod(k, D)
        dy -= d_m
        dx -= d_m
        out = (ys + dy < 0) | (ys + dy >= h) | (xs + dx < 0) | (xs + dx >= w)
        s[..., k][out] = np.finfo(dtype).min
    return s


def jaccard_oracle(a, b):
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    inter = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p and q)
    union = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p or q)
    return 1.0 if union == 0 else inter / union


# ReLU stacks: a 1e-4 probe often straddles a kink somewhere in a block, so
# block-level checks use a smaller step (still far above double round-off)
BLOCK_STEP = 1e-6


def random_instance(params, rng, bias_scale=0.1):
    """Same weights with random biases, so no pre-activation sits exactly on a ReLU kink."""
    return params.replace(
        {k: (rng.standard_normal(v.shape) * bias_scale if k.endswith(".b") else v) for k, v in params.tensors.items()}
    )


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, part: str, passed: bool, detail: str) -> bool:
    """Record and print one acceptance line; returns ``passed`` for the assert."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {part}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed

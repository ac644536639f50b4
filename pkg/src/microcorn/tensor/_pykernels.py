"""NumPy implementations of the fused kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Inputs are C-contiguous float64 arrays; outputs are freshly allocated.
"""
import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gy * (cdf + x * pdf)


def layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(gy, xhat, rstd, gain):
    d = xhat.shape[1]
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    gx = (rstd[:, None] / d) * (
        d * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, ggain, gbias


def causal_attn_fwd(q, k, v, scale):
    """q, k, v: (N, T, dh). Returns (out, probs).

    Scores and weighted sums are accumulated so that row i never depends on
    positions > i, bit for bit, whatever the sequence length.
    """
    n, t, _ = q.shape
    scores = (q[:, :, None, :] * k[:, None, :, :]).sum(axis=-1) * scale
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores[:, mask] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    denom = np.cumsum(e, axis=-1)[:, :, -1:]
    p = e / denom
    out = np.zeros_like(q)
    for j in range(t):
        out += p[:, :, j : j + 1] * v[:, j : j + 1, :]
    return out, p


def causal_attn_bwd(gout, q, k, v, p, scale):
    gv = np.matmul(p.transpose(0, 2, 1), gout)
    gp = np.matmul(gout, v.transpose(0, 2, 1))
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    gq = np.matmul(gs, k) * scale
    gk = np.matmul(gs.transpose(0, 2, 1), q) * scale
    return gq, gk, gv


def xent_fwd(logits, targets):
    """Summed cross-entropy over rows whose target is >= 0.

    Returns (loss_sum, count, probs).
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    rows = np.nonzero(targets >= 0)[0]
    logp = shifted[rows, targets[rows]] - np.log(z[rows, 0])
    return float(-logp.sum()), int(rows.size), probs


def xent_bwd(probs, targets, scale):
    g = probs.copy()
    keep = targets >= 0
    rows = np.nonzero(keep)[0]
    g[rows, targets[rows]] -= 1.0
    g[~keep] = 0.0
    g *= scale
    return g

"""Multi-head self, performer and agent attention over one embedding sequence.

Every mechanism has a public forward function plus a private
``_<name>_forward`` / ``_<name>_backward`` pair. The private forward returns
the context together with a cache that the backward consumes to produce exact
gradients with respect to the per-head Q, K, V (and the depth-wise kernel for
agent attention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numeric import (
    ShapeError,
    _softmax_rows_inplace,
    as_matrix,
    check_mask,
    depthwise_conv1d,
    depthwise_conv1d_backward,
    gaussian_matrix,
    softmax_backward,
)

MECHANISMS = ("self", "performer", "agent")


@dataclass(frozen=True)
class AttentionConfig:
    """Hyper-parameters of the attention block.

    ``r`` is only read by performer attention; ``p``, ``n_cap`` and
    ``dwc_width`` only by agent attention. ``d_attn`` is the total width over
    all heads.
    """

    mechanism: str = "self"
    d_model: int = 1024
    d_attn: int = 64
    heads: int = 4
    r: int = 128
    p: int = 4
    n_cap: int | None = None
    dwc_width: int = 3
    performer_normalized: bool = True

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}; expected one of {MECHANISMS}")
        for name in ("d_model", "d_attn", "heads", "r", "dwc_width"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_attn % self.heads:
            raise ValueError(f"d_attn={self.d_attn} is not divisible by heads={self.heads}")
        if self.p <= 1 or self.p % 2:
            raise ValueError(f"p must be even and > 1, got {self.p}")
        if self.dwc_width % 2 == 0:
            raise ValueError(f"dwc_width must be odd, got {self.dwc_width}")
        if self.n_cap is not None and self.n_cap < 1:
            raise ValueError("n_cap must be >= 1 when set")

    @property
    def d_head(self):
        return self.d_attn // self.heads

    def to_dict(self):
        return {
            "mechanism": self.mechanism,
            "d_model": self.d_model,
            "d_attn": self.d_attn,
            "heads": self.heads,
            "r": self.r,
            "p": self.p,
            "n_cap": self.n_cap,
            "dwc_width": self.dwc_width,
            "performer_normalized": self.performer_normalized,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ProjectionWeights:
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray

    @classmethod
    def init(cls, rng, d_model, d_attn):
        """Weights ~ N(0, 1/d_model), zero biases."""
        std = 1.0 / math.sqrt(d_model)
        return cls(
            Wq=gaussian_matrix(rng, d_model, d_attn) * std,
            Wk=gaussian_matrix(rng, d_model, d_attn) * std,
            Wv=gaussian_matrix(rng, d_model, d_attn) * std,
            bq=np.zeros(d_attn),
            bk=np.zeros(d_attn),
            bv=np.zeros(d_attn),
        )

    @classmethod
    def zeros(cls, d_model, d_attn):
        return cls(*(np.zeros((d_model, d_attn)) for _ in range(3)),
                   *(np.zeros(d_attn) for _ in range(3)))


@dataclass
class FeatureMap:
    """Frozen Gaussian projection ``omega`` of shape (r, d_head)."""

    omega: np.ndarray

    @classmethod
    def draw(cls, rng, r, d_head):
        return cls(gaussian_matrix(rng, r, d_head))

    @property
    def r(self):
        return self.omega.shape[0]


@dataclass
class HeadTriplet:
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.Q = as_matrix(self.Q, "Q")
        self.K = as_matrix(self.K, "K")
        self.V = as_matrix(self.V, "V")
        if not self.Q.shape[0] == self.K.shape[0] == self.V.shape[0]:
            raise ShapeError("Q, K, V must have the same number of rows")
        if self.Q.shape[1] != self.K.shape[1]:
            raise ShapeError("Q and K must have the same width")


@dataclass
class AgentState:
    G: np.ndarray
    n: int
    Va: np.ndarray | None = None


def _zero_padded(m, mask):
    if mask.all():
        return m
    return np.where(mask[:, None], m, 0.0)


def _project(x, w):
    q, k, v = x @ w.Wq, x @ w.Wk, x @ w.Wv
    # in-place bias adds avoid three more N x d_attn temporaries
    q += w.bq
    k += w.bk
    v += w.bv
    return q, k, v


def project_qkv(x, w, config):
    """Project ``x`` to Q, K, V and split the columns into per-head triplets."""
    x = as_matrix(x, "x")
    if x.shape[1] != config.d_model or w.Wq.shape != (config.d_model, config.d_attn):
        raise ShapeError(
            f"x has {x.shape[1]} columns, weights are {w.Wq.shape}, "
            f"config expects ({config.d_model}, {config.d_attn})"
        )
    q, k, v = _project(x, w)
    dh = config.d_head
    return [
        HeadTriplet(q[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh], v[:, i * dh:(i + 1) * dh])
        for i in range(config.heads)
    ]


# -- self attention -----------------------------------------------------------

def _self_forward(q, k, v, mask):
    scale = 1.0 / math.sqrt(q.shape[1])
    q, k, v = (_zero_padded(a, mask) for a in (q, k, v))
    s = q @ k.T
    s *= scale
    a = _softmax_rows_inplace(s, mask)
    ctx = a @ v
    ctx[~mask] = 0.0
    return ctx, (q, k, v, a, mask, scale)


def _self_backward(grad, cache):
    q, k, v, a, mask, scale = cache
    g = _zero_padded(grad, mask)
    grad_v = a.T @ g
    grad_s = softmax_backward(g @ v.T, a)
    grad_s *= scale
    grad_q = grad_s @ k
    grad_k = grad_s.T @ q
    for m in (grad_q, grad_k, grad_v):
        m[~mask] = 0.0
    return grad_q, grad_k, grad_v


def self_attention(head, mask=None):
    """Softmax attention ``A = softmax(QK^T / sqrt(d_head))``, context ``A V``.

    Returns ``(context, A)``. Padded key columns of ``A`` are exactly zero and
    padded context rows are zeroed.
    """
    mask = check_mask(mask, head.Q.shape[0])
    ctx, cache = _self_forward(head.Q, head.K, head.V, mask)
    return ctx, cache[3]


# -- performer attention ------------------------------------------------------

def _phi_forward(m, omega, scale, mask):
    # m has its padded rows zeroed already
    ms = m * scale
    u = ms @ omega.T
    # one stabilizer for the whole call, taken over valid rows only
    # (masks are prefix-valid, so a slice avoids copying u)
    stab = float(u[:np.count_nonzero(mask)].max())
    u -= 0.5 * np.sum(ms * ms, axis=1, keepdims=True) + stab
    np.exp(u, out=u)
    u /= math.sqrt(omega.shape[0])
    u[~mask] = 0.0
    return u, stab, ms


def _phi_backward(grad, feats, ms, omega, scale):
    g = grad * feats
    grad_ms = g @ omega
    grad_ms -= np.sum(g, axis=1, keepdims=True) * ms
    return grad_ms * scale


def performer_phi(m, fm, scale, mask=None):
    """Positive random features ``exp(Omega x - |x|^2 / 2 - s) / sqrt(r)``.

    ``x`` is each row of ``m`` multiplied by ``scale``; ``s`` is one constant
    shared by the whole call, the maximum exponent over valid rows. Padded
    rows of the output are zero.
    """
    m = as_matrix(m)
    if not scale > 0:
        raise ValueError("scale must be positive")
    if m.shape[1] != fm.omega.shape[1]:
        raise ShapeError(f"feature map expects width {fm.omega.shape[1]}, got {m.shape[1]}")
    mask = check_mask(mask, m.shape[0])
    return _phi_forward(_zero_padded(m, mask), fm.omega, scale, mask)[0]


def _performer_forward(q, k, v, omega, mask, normalized):
    scale = q.shape[1] ** -0.25
    q, k, v = (_zero_padded(a, mask) for a in (q, k, v))
    qf, q_stab, qs = _phi_forward(q, omega, scale, mask)
    kf, k_stab, ks = _phi_forward(k, omega, scale, mask)
    kv = kf.T @ v
    num = qf @ kv
    if normalized:
        ksum = kf.sum(axis=0)
        den = qf @ ksum
        if np.any(den[mask] <= 0.0) or not np.all(np.isfinite(den[mask])):
            raise FloatingPointError("performer normalizer has a non-positive entry")
        den[~mask] = 1.0
        ctx = num / den[:, None]
        factor = None
    else:
        # undo both stabilizers so the result is the unstabilized expression
        ksum = den = None
        factor = math.exp(q_stab + k_stab) / math.sqrt(omega.shape[0])
        ctx = num * factor
    ctx[~mask] = 0.0
    cache = (v, qf, qs, kf, ks, kv, ksum, den, ctx, factor, omega, scale, mask)
    return ctx, cache


def _performer_backward(grad, cache):
    v, qf, qs, kf, ks, kv, ksum, den, ctx, factor, omega, scale, mask = cache
    g = _zero_padded(grad, mask)
    if factor is None:
        g_num = g / den[:, None]
        g_den = -np.sum(g * ctx, axis=1) / den
        g_qf = g_num @ kv.T + np.outer(g_den, ksum)
        g_kv = qf.T @ g_num
        g_kf = v @ g_kv.T + (qf.T @ g_den)[None, :]
    else:
        g_qf = factor * (g @ kv.T)
        g_kv = factor * (qf.T @ g)
        g_kf = v @ g_kv.T
    g_kf[~mask] = 0.0
    grad_v = kf @ g_kv
    grad_q = _phi_backward(g_qf, qf, qs, omega, scale)
    grad_k = _phi_backward(g_kf, kf, ks, omega, scale)
    for m in (grad_q, grad_k, grad_v):
        m[~mask] = 0.0
    return grad_q, grad_k, grad_v


def performer_attention(head, fm, mask=None, normalized=True):
    """Kernelized attention computed as ``Q' (K'^T V)``.

    Normalized mode divides each row by ``Q' (K'^T 1)`` so the implied
    attention weights are row-stochastic. Otherwise the context is
    ``Q' (K'^T V) / sqrt(r)`` with no normalizer. No N x N matrix is formed.
    """
    if head.Q.shape[1] != fm.omega.shape[1]:
        raise ShapeError(f"feature map expects width {fm.omega.shape[1]}, got {head.Q.shape[1]}")
    mask = check_mask(mask, head.Q.shape[0])
    return _performer_forward(head.Q, head.K, head.V, fm.omega, mask, normalized)[0]


# -- agent attention ----------------------------------------------------------

def agent_plan(n_valid, p, n_cap=None):
    """Number of halving stages and agent count for ``n_valid`` frames.

    ``p`` pooling layers give ``p // 2`` halvings, so that
    ``n = max(1, n_valid // 2 ** (p // 2))``. With ``n_cap`` set, further
    halvings are added until ``n <= n_cap``.
    """
    if p <= 1 or p % 2:
        raise ValueError(f"p must be even and > 1, got {p}")
    stages = p // 2
    n = max(1, n_valid >> stages)
    while n_cap is not None and n > n_cap:
        stages += 1
        n = max(1, n_valid >> stages)
    return stages, n


def _pool_forward(rows, stages, n):
    sizes = []
    for _ in range(stages):
        m = rows.shape[0]
        sizes.append(m)
        even = m - m % 2
        pooled = (rows[0:even:2] + rows[1:even:2]) / 2
        if m % 2:
            pooled = np.vstack([pooled, rows[-1:]])
        rows = pooled
    return rows[:n], sizes


def _pool_backward(grad_g, sizes, width):
    m_out = (sizes[-1] + 1) // 2 if sizes else grad_g.shape[0]
    g = np.zeros((m_out, width))
    g[:grad_g.shape[0]] = grad_g
    for m in reversed(sizes):
        prev = np.zeros((m, width))
        half = m // 2
        prev[0:2 * half:2] = g[:half] / 2
        prev[1:2 * half:2] = g[:half] / 2
        if m % 2:
            prev[-1] = g[half]
        g = prev
    return g


def agent_pool(q, p, mask=None, n_cap=None):
    """Agent matrix from successive pair-mean halvings of the valid rows of ``q``.

    Each stage replaces rows (1,2), (3,4), ... by their means; an odd trailing
    row passes through unchanged. The result is truncated to the leading
    ``n`` rows given by :func:`agent_plan`.
    """
    q = as_matrix(q, "q")
    mask = check_mask(mask, q.shape[0])
    n_valid = int(mask.sum())
    stages, n = agent_plan(n_valid, p, n_cap)
    g, _ = _pool_forward(q[:n_valid], stages, n)
    return AgentState(G=g, n=n)


def _agent_forward(q, k, v, kernel, p, n_cap, mask):
    scale = 1.0 / math.sqrt(q.shape[1])
    n_valid = int(mask.sum())
    q, k, v = (_zero_padded(a, mask) for a in (q, k, v))
    stages, n = agent_plan(n_valid, p, n_cap)
    g, sizes = _pool_forward(q[:n_valid], stages, n)
    s1 = g @ k.T
    s1 *= scale
    a1 = _softmax_rows_inplace(s1, mask)
    va = a1 @ v
    s2 = q @ g.T
    s2 *= scale
    a2 = _softmax_rows_inplace(s2)
    out = a2 @ va
    out += depthwise_conv1d(v, kernel, mask)
    out[~mask] = 0.0
    return out, (q, k, v, g, sizes, a1, va, a2, kernel, scale, mask)


def _agent_backward(grad, cache):
    q, k, v, g, sizes, a1, va, a2, kernel, scale, mask = cache
    d = _zero_padded(grad, mask)
    g_va = a2.T @ d
    g_s2 = softmax_backward(d @ va.T, a2)
    g_s2 *= scale
    grad_q = g_s2 @ g
    grad_g = g_s2.T @ q
    grad_v = a1.T @ g_va
    g_s1 = softmax_backward(g_va @ v.T, a1)
    g_s1 *= scale
    grad_g += g_s1 @ k
    grad_k = g_s1.T @ g
    n_valid = int(mask.sum())
    grad_q[:n_valid] += _pool_backward(grad_g, sizes, q.shape[1])
    conv_v, grad_kernel = depthwise_conv1d_backward(d, v, kernel, mask)
    grad_v += conv_v
    for m in (grad_q, grad_k, grad_v):
        m[~mask] = 0.0
    return grad_q, grad_k, grad_v, grad_kernel


def agent_attention(head, p, dwc_kernel, mask=None, n_cap=None):
    """Agent aggregation then broadcast, plus a depth-wise conv residual on V.

    ``V_a = softmax(G K^T / sqrt(d_head)) V`` with padded keys masked, then
    ``softmax(Q G^T / sqrt(d_head)) V_a + dwconv(V)``.
    """
    mask = check_mask(mask, head.Q.shape[0])
    kernel = as_matrix(dwc_kernel, "dwc_kernel")
    return _agent_forward(head.Q, head.K, head.V, kernel, p, n_cap, mask)[0]


# -- multi-head ---------------------------------------------------------------

def _multi_head_forward(x, weights, config, mask, feature_map=None, dwc_kernel=None):
    x = as_matrix(x, "x")
    mask = check_mask(mask, x.shape[0])
    if x.shape[1] != config.d_model or weights.Wq.shape != (config.d_model, config.d_attn):
        raise ShapeError(
            f"x has {x.shape[1]} columns, weights are {weights.Wq.shape}, "
            f"config expects ({config.d_model}, {config.d_attn})"
        )
    if config.mechanism == "performer" and feature_map is None:
        raise ValueError("performer attention needs a feature map")
    if config.mechanism == "agent" and dwc_kernel is None:
        raise ValueError("agent attention needs a depth-wise kernel")
    x = _zero_padded(x, mask)
    q, k, v = _project(x, weights)
    dh = config.d_head
    ctx = np.empty((x.shape[0], config.d_attn))
    caches = []
    for h in range(config.heads):
        cols = slice(h * dh, (h + 1) * dh)
        if config.mechanism == "self":
            out, cache = _self_forward(q[:, cols], k[:, cols], v[:, cols], mask)
        elif config.mechanism == "performer":
            out, cache = _performer_forward(q[:, cols], k[:, cols], v[:, cols],
                                            feature_map.omega, mask, config.performer_normalized)
        else:
            out, cache = _agent_forward(q[:, cols], k[:, cols], v[:, cols], dwc_kernel[:, cols],
                                        config.p, config.n_cap, mask)
        ctx[:, cols] = out
        caches.append(cache)
    return ctx, (x, config, mask, caches)


def _multi_head_backward(grad_ctx, cache):
    """Gradients of the projection weights (and depth-wise kernel) from ``grad_ctx``."""
    x, config, mask, caches = cache
    dh = config.d_head
    grad_q = np.empty((x.shape[0], config.d_attn))
    grad_k = np.empty_like(grad_q)
    grad_v = np.empty_like(grad_q)
    grad_kernel = np.empty((config.dwc_width, config.d_attn)) if config.mechanism == "agent" else None
    for h, head_cache in enumerate(caches):
        cols = slice(h * dh, (h + 1) * dh)
        g = grad_ctx[:, cols]
        if config.mechanism == "self":
            grad_q[:, cols], grad_k[:, cols], grad_v[:, cols] = _self_backward(g, head_cache)
        elif config.mechanism == "performer":
            grad_q[:, cols], grad_k[:, cols], grad_v[:, cols] = _performer_backward(g, head_cache)
        else:
            grad_q[:, cols], grad_k[:, cols], grad_v[:, cols], grad_kernel[:, cols] = \
                _agent_backward(g, head_cache)
    grads = {
        "Wq": x.T @ grad_q, "bq": grad_q.sum(axis=0),
        "Wk": x.T @ grad_k, "bk": grad_k.sum(axis=0),
        "Wv": x.T @ grad_v, "bv": grad_v.sum(axis=0),
    }
    if grad_kernel is not None:
        grads["dwc_kernel"] = grad_kernel
    return grads


def multi_head_forward(x, weights, config, mask=None, feature_map=None, dwc_kernel=None):
    """Context matrix (N x d_attn): per-head contexts concatenated by column.

    Head ``h`` owns columns ``[h * d_head, (h + 1) * d_head)`` of every
    projection and of the output. Dropout is not applied here.
    """
    return _multi_head_forward(x, weights, config, mask, feature_map, dwc_kernel)[0]

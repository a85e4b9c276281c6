"""Forward ops with reverse-mode gradient rules.

Each op computes with plain numpy and, when a tape is active, records a
vector-Jacobian product closure. The raw numpy kernels (``softmax_kernel``,
``rmsnorm_kernel``, ``rope_kernel``) are shared with the untaped streaming
path so both routes run identical arithmetic.
"""

from __future__ import annotations

import warnings

import numpy as np

from .tensor import ShapeError, Tensor, active_tape, check_finite

RMSNORM_EPS = 1e-6


def _wrap(data: np.ndarray, parents, vjp, name: str) -> Tensor:
    check_finite(data, name)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None:
        tape.record(out, parents, vjp, name)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _wrap(data, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _wrap(data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return _wrap(-a.data, (a,), lambda g: (-g,), "neg")


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiated array (attention bias masks and the like)."""
    data = a.data + const

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _wrap(data, (a,), vjp, "add_const")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _wrap(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _wrap(data, (a, b), vjp, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    if (a.data.ndim != 3 or b.data.ndim != 3
            or a.data.shape[0] != b.data.shape[0]
            or a.data.shape[2] != b.data.shape[1]):
        raise ShapeError(f"bmm shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _wrap(data, (a, b), vjp, "bmm")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    data = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _wrap(data, (a,), vjp, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _wrap(data, (a,), vjp, "reshape")


def take_rows(a: Tensor, idx: np.ndarray, unique: bool = True) -> Tensor:
    """Gather rows along the first axis.

    ``unique=True`` (row partitions, the common case here) lets the backward
    scatter use plain assignment instead of the much slower ``np.add.at``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _wrap(data, (a,), vjp, "take_rows")


def put_rows(n_rows: int, idx: np.ndarray, sub: Tensor) -> Tensor:
    """Scatter ``sub`` rows into a zero array of ``n_rows`` rows."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows,) + sub.data.shape[1:], dtype=sub.data.dtype)
    data[idx] = sub.data

    def vjp(g):
        return (g[idx],)

    return _wrap(data, (sub,), vjp, "put_rows")


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _wrap(data, (table,), vjp, "embed")


def repeat_groups(a: Tensor, g: int, axis: int) -> Tensor:
    """Repeat entries along ``axis`` g times (grouped-query K/V expansion)."""
    data = np.repeat(a.data, g, axis=axis)
    n = a.data.shape[axis]

    def vjp(grad):
        shp = list(grad.shape)
        shp[axis:axis + 1] = [n, g]
        return (grad.reshape(shp).sum(axis=axis + 1),)

    return _wrap(data, (a,), vjp, "repeat_groups")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def vjp(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _wrap(data, (a,), vjp, "silu")


# ---------------------------------------------------------------------------
# shared raw kernels
# ---------------------------------------------------------------------------

def softmax_kernel(x: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction; rows on the last axis."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm_kernel(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMSNORM_EPS) * gain


def rope_kernel(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotate interleaved pairs of the last axis by position-scaled angles.

    x: [..., n_heads, d_head] with d_head even; positions broadcast over the
    leading axes (shape [...,] matching x without the last two dims, or a
    scalar). Pair i rotates by angle pos * theta**(-2i/d_head).
    """
    d_head = x.shape[-1]
    half = d_head // 2
    inv_freq = (theta ** (-2.0 * np.arange(half) / d_head)).astype(x.dtype)
    pos = np.asarray(positions, dtype=x.dtype)
    ang = pos[..., None, None] * inv_freq if pos.ndim else pos * inv_freq
    cos, sin = np.cos(ang), np.sin(ang)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray,
              group_size: int) -> Tensor:
    """Grouped-query scaled-dot-product attention, memory-checkpointed.

    q [B,H,T,dh]; k, v [B,KV,T,dh] with H = KV*group_size; ``bias`` is a
    broadcastable additive mask (0 where visible, a large negative constant
    where not). The backward pass recomputes the attention weights from the
    saved inputs instead of retaining any [T, T] array, which keeps taped
    training memory linear in sequence length.
    """
    scale_ = q.data.shape[-1] ** -0.5
    g = group_size

    kr = np.repeat(k.data, g, axis=1) if g > 1 else k.data
    vr = np.repeat(v.data, g, axis=1) if g > 1 else v.data
    scores = q.data @ kr.transpose(0, 1, 3, 2) * scale_ + bias
    m = scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores - m)
    probs /= probs.sum(axis=-1, keepdims=True)
    del scores, m
    data = probs @ vr

    def vjp(grad):
        dvr = probs.transpose(0, 1, 3, 2) @ grad
        dprobs = grad @ vr.transpose(0, 1, 3, 2)
        ds = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        ds *= scale_
        dq = ds @ kr
        dkr = ds.transpose(0, 1, 3, 2) @ q.data
        if g > 1:
            b, _, t, dh = dkr.shape
            kv = k.data.shape[1]
            dk = dkr.reshape(b, kv, g, t, dh).sum(axis=2)
            dv = dvr.reshape(b, kv, g, t, dh).sum(axis=2)
        else:
            dk, dv = dkr, dvr
        return dq, dk, dv

    return _wrap(data, (q, k, v), vjp, "attention")


# ---------------------------------------------------------------------------
# taped composite ops
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stable under large magnitudes."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-D input, got {x.data.shape}")
    p = softmax_kernel(x.data)

    def vjp(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _wrap(p, (x,), vjp, "softmax_rows")


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,):
        raise ShapeError(
            f"rmsnorm gain shape {gain.data.shape} does not match last dim {d}")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + RMSNORM_EPS)
    norm = x.data * inv
    data = norm * gain.data

    def vjp(g):
        gg = g * gain.data
        dot = np.sum(gg * x.data, axis=-1, keepdims=True)
        gx = inv * gg - (inv ** 3 / d) * x.data * dot
        ggain = np.sum(g * norm, axis=tuple(range(g.ndim - 1)))
        return gx, ggain

    return _wrap(data, (x, gain), vjp, "rmsnorm")


def rope_apply(x: Tensor, position: int, theta: float) -> Tensor:
    """Rotary embedding of one token's heads at an absolute position."""
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rope requires even head dim, got {x.data.shape[-1]}")
    if position < 0:
        raise ShapeError(f"rope position must be >= 0, got {position}")
    return _rope_taped(x, np.asarray(float(position)), theta)


def rope_rows(x: Tensor, positions: np.ndarray, theta: float) -> Tensor:
    """Rotary embedding of a row batch: x [N, heads, d_head], positions [N]."""
    if x.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rope requires even head dim, got {x.data.shape[-1]}")
    return _rope_taped(x, np.asarray(positions, dtype=np.float64), theta)


def _rope_taped(x: Tensor, positions: np.ndarray, theta: float) -> Tensor:
    data = rope_kernel(x.data, positions, theta)

    def vjp(g):
        # the rotation is orthogonal: the adjoint rotates by the negated angle
        return (rope_kernel(g, -positions, theta),)

    return _wrap(data, (x,), vjp, "rope")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over masked-in positions.

    logits [T, V]; targets int ids < V; mask selects contributing rows. An
    all-masked call warns and returns exactly 0.
    """
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    t, v = logits.data.shape
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError(
            f"cross_entropy: logits {logits.data.shape} vs targets "
            f"{targets.shape} / mask {mask.shape}")
    if np.any(targets[mask] >= v) or np.any(targets[mask] < 0):
        raise ShapeError(f"cross_entropy: target id out of range for vocab {v}")

    n = int(mask.sum())
    if n == 0:
        warnings.warn("cross_entropy over an empty mask; loss defined as 0",
                      stacklevel=2)
        data = np.asarray(0.0, dtype=logits.data.dtype)
        return _wrap(data, (logits,), lambda g: (np.zeros_like(logits.data),),
                     "cross_entropy")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    nll = lse - shifted[np.arange(t), targets]
    data = np.asarray(np.sum(nll[mask]) / n, dtype=logits.data.dtype)

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(t), targets] -= 1.0
        p[~mask] = 0.0
        return (p * (float(g) / n),)

    return _wrap(data, (logits,), vjp, "cross_entropy")

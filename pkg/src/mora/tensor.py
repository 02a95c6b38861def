"""Dense float64 tensors with reverse-mode automatic differentiation.

A small eager engine: every differentiable operation appends an entry to a
global ComputationTape, and ``backward`` replays the tape in reverse. Because
operands are always recorded before their results, reverse recording order is
a reverse topological order, so each node's rule runs exactly once.

Everything is double precision so finite-difference checks have headroom.
Tape recording is single-threaded; tensors without gradient state are
immutable after construction and safe to share across threads read-only.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputationTape",
    "NumericError",
    "DegenerateBatchError",
    "tape",
    "reset_tape",
    "backward",
    "add",
    "mul",
    "matmul",
    "multi_head_attention",
    "transpose",
    "reshape",
    "narrow",
    "concat",
    "gather_rows",
    "relu",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "cross_entropy",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NumericError(ArithmeticError):
    """An operation received or produced invalid numerics (NaN/Inf)."""


class DegenerateBatchError(ValueError):
    """A loss was asked to average over zero tokens."""


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping.

    ``requires_grad`` marks tensors that should accumulate gradients during
    ``backward``. A *frozen* tensor never accumulates gradient, no matter how
    it is used; freezing is how backbone and encoder parameters are pinned.
    """

    __slots__ = ("data", "requires_grad", "frozen", "grad", "_grad_borrowed", "_tape_ref")

    def __init__(self, data, requires_grad: bool = False, frozen: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.frozen = bool(frozen)
        self.requires_grad = bool(requires_grad) and not self.frozen
        self.grad: np.ndarray | None = None
        self._grad_borrowed = False
        self._tape_ref: tuple[int, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def freeze(self) -> "Tensor":
        """Mark this tensor as permanently non-trainable."""
        self.frozen = True
        self.requires_grad = False
        self.grad = None
        return self

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_borrowed = False

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen or not self.requires_grad:
            return
        if self.grad is None:
            # borrow the buffer; copy lazily on the second accumulation so
            # aliased gradients are never mutated in place
            self.grad = g
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + g
            self._grad_borrowed = False
        else:
            self.grad += g

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self.frozen:
            flags.append("frozen")
        tag = f" [{','.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; constants (floats, ndarrays) are accepted on either side
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return _sum_all(self)

    def mean(self) -> "Tensor":
        return _mean_all(self)


class _TapeEntry:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class ComputationTape:
    """Ordered record of executed ops with their local backward rules."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._generation = 0

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        out._tape_ref = (self._generation, len(self._entries))
        self._entries.append(_TapeEntry(out, parents, backward_fn))

    def reset(self) -> None:
        """Drop all recorded entries (start of a new training step)."""
        self._entries.clear()
        self._generation += 1

    def backward(self, root: Tensor) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Replays entries up to the root in reverse recording order; each
        reachable node is visited exactly once. Frozen leaves stay untouched.
        """
        if root.shape != ():
            raise ValueError(
                f"backward root must be a scalar, got shape {root.shape}"
            )
        ref = root._tape_ref
        if ref is not None and ref[0] != self._generation:
            raise ValueError("backward root is not on the active tape")
        root.accumulate(np.ones((), dtype=np.float64))
        if ref is None:
            return
        stop = ref[1] + 1
        for entry in reversed(self._entries[:stop]):
            g = entry.out.grad
            if g is None:
                continue
            entry.backward_fn(g)


_tape = ComputationTape()


def tape() -> ComputationTape:
    return _tape


def reset_tape() -> None:
    _tape.reset()


def backward(root: Tensor) -> None:
    _tape.backward(root)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if out.requires_grad:
        _tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _record(out, (a, b), bwd)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t)
    if mask is None:
        mask = np.triu(np.full((t, t), -1e30), k=1)
        _MASK_CACHE[t] = mask
    return mask


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool) -> Tensor:
    """Scaled dot-product attention over column-split heads, as one fused op.

    q is (Tq, d); k and v are (Tk, d); d must divide into n_heads. Causal
    masking requires Tq == Tk. Fused so a forward pass records one tape entry
    instead of the dozen-odd a composed implementation would.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("attention inputs must be matrices")
    tq, d = q.shape
    tk = k.shape[0]
    if k.shape[1] != d or v.shape != k.shape:
        raise ValueError(
            f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if d % n_heads != 0:
        raise ValueError(f"width {d} is not divisible by {n_heads} heads")
    if causal and tq != tk:
        raise ValueError("causal attention needs equal query/key lengths")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(tq, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(tk, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(tk, n_heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if causal:
        scores = scores + _causal_mask(tq)
    m = scores.max(axis=2, keepdims=True)
    e = np.exp(scores - m)
    attn = e / e.sum(axis=2, keepdims=True)
    merged = (attn @ vh).transpose(1, 0, 2).reshape(tq, d)
    out = Tensor(
        merged,
        requires_grad=q.requires_grad or k.requires_grad or v.requires_grad,
    )

    def bwd(g):
        gh = g.reshape(tq, n_heads, dh).transpose(1, 0, 2)
        if q.requires_grad or k.requires_grad:
            d_attn = gh @ vh.transpose(0, 2, 1)
            d_scores = attn * (d_attn - (d_attn * attn).sum(axis=2, keepdims=True))
            d_scores *= scale
            if q.requires_grad:
                dq = (d_scores @ kh).transpose(1, 0, 2).reshape(tq, d)
                q.accumulate(dq)
            if k.requires_grad:
                dk = (d_scores.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(tk, d)
                k.accumulate(dk)
        if v.requires_grad:
            dv = (attn.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(tk, d)
            v.accumulate(dv)

    return _record(out, (q, k, v), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy(), requires_grad=a.requires_grad)

    def bwd(g):
        a.accumulate(g.T)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.reshape(shape).copy(), requires_grad=a.requires_grad)

    def bwd(g):
        a.accumulate(g.reshape(a.shape))

    return _record(out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient is zero elsewhere."""
    a = _coerce(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy(), requires_grad=a.requires_grad)

    def bwd(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[index] = g
        a.accumulate(full)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=axis),
        requires_grad=any(p.requires_grad for p in parts),
    )
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            p.accumulate(g[tuple(index)])
            offset += n

    return _record(out, tuple(parts), bwd)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows of an embedding table by integer id."""
    table = _coerce(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError(f"gather_rows expects a flat id list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"gather_rows id out of range for table with {table.shape[0]} rows"
        )
    out = Tensor(table.data[idx], requires_grad=table.requires_grad)

    def bwd(g):
        full = np.zeros(table.shape, dtype=np.float64)
        np.add.at(full, idx, g)
        table.accumulate(full)

    return _record(out, (table,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0), requires_grad=a.requires_grad)

    def bwd(g):
        a.accumulate(g * mask)

    return _record(out, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _coerce(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, requires_grad=a.requires_grad)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a.accumulate(g * (cdf + x * pdf))

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by a learnable gain."""
    x, gain = _coerce(x), _coerce(gain)
    if gain.shape != (x.shape[-1],):
        raise ValueError(
            f"layer_norm gain shape {gain.shape} does not match feature dim {x.shape[-1]}"
        )
    inv_d = 1.0 / x.shape[-1]
    mu = x.data.sum(axis=-1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data, requires_grad=x.requires_grad or gain.requires_grad)

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate(
                _unbroadcast((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0), gain.shape)
            )
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.sum(axis=-1, keepdims=True) * inv_d
            m2 = (gh * xhat).sum(axis=-1, keepdims=True) * inv_d
            x.accumulate(inv * (gh - m1 - xhat * m2))

    return _record(out, (x, gain), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed with max-subtraction."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        x.accumulate(y * (g - dot))

    return _record(out, (x,), bwd)


def cross_entropy(logits: Tensor, targets, ignore_index: int) -> Tensor:
    """Mean negative log-softmax probability of the target tokens.

    Positions whose target equals ``ignore_index`` are excluded from the
    mean. Raises DegenerateBatchError when nothing is left to average.
    """
    logits = _coerce(logits)
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects T x V logits, got {logits.shape}")
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.shape != (logits.shape[0],):
        raise ValueError(
            f"cross_entropy targets length {tgt.shape} does not match {logits.shape[0]} rows"
        )
    kept = tgt != ignore_index
    n_kept = int(kept.sum())
    if n_kept == 0:
        raise DegenerateBatchError("all target positions are ignored")
    valid = tgt[kept]
    if valid.min() < 0 or valid.max() >= logits.shape[1]:
        raise ValueError(
            f"cross_entropy target id out of range for vocab {logits.shape[1]}"
        )
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    rows = np.nonzero(kept)[0]
    nll = lse[rows] - logits.data[rows, tgt[rows]]
    out = Tensor(nll.sum() / n_kept, requires_grad=logits.requires_grad)

    def bwd(g):
        p = np.exp(logits.data - lse[:, None])
        d = np.zeros_like(logits.data)
        d[rows] = p[rows]
        d[rows, tgt[rows]] -= 1.0
        logits.accumulate(g * d / n_kept)

    return _record(out, (logits,), bwd)


def _sum_all(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad)

    def bwd(g):
        a.accumulate(np.full(a.shape, float(g), dtype=np.float64))

    return _record(out, (a,), bwd)


def _mean_all(a: Tensor) -> Tensor:
    a = _coerce(a)
    out = Tensor(a.data.mean(), requires_grad=a.requires_grad)

    def bwd(g):
        a.accumulate(np.full(a.shape, float(g) / a.size, dtype=np.float64))

    return _record(out, (a,), bwd)

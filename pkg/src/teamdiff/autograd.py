"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Everything is float64 and at most lightly broadcast (a bias vector over the
last dim, or a python scalar). Ops record onto the innermost active
:class:`Tape`; with no tape active they just compute values, which is what
inference uses.

    with Tape() as tape:
        loss = mse(x @ w + b, y)
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class Tape:
    """Ordered record of differentiable ops, one per thread."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out, parents, vjp):
        self.records.append((out, parents, vjp))

    def backward(self, loss: "Tensor", seed=None) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Records are visited in exact reverse creation order; fan-out is
        handled by additive accumulation.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward needs a scalar loss or an explicit seed")
            seed = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(seed, dtype=np.float64)}
        produced = set()
        for out, parents, vjp in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # whatever is left belongs to leaves (tensors not produced on this tape)
        leaves = {}
        for out, parents, _ in self.records:
            for p in parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            if key in grads:
                leaf.grad = grads[key] if leaf.grad is None else leaf.grad + grads[key]


def recording() -> bool:
    return bool(_tape_stack())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by {name}")
    return arr


def _make(name: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable | None) -> Tensor:
    """Wrap an op result and record it if any parent is being differentiated."""
    _finite(name, data)
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    stack = _tape_stack()
    if needs and stack and vjp is not None:
        out.requires_grad = True
        stack[-1].record(out, tuple(parents), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # bias over the last dim
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or b.shape == () or a.shape == ():
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / linear algebra

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data
    return _make("add", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data
    return _make("sub", data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; same shapes, a scalar, or a last-dim vector."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    return _make("mul", data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: bad shapes {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _make("matmul", data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def sum_rows(a) -> Tensor:
    """Sum over the last dim: (B, D) -> (B,)."""
    a = as_tensor(a)
    return _make("sum_rows", a.data.sum(axis=-1), (a,),
                 lambda g: (np.broadcast_to(g[..., None], a.shape).copy(),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    data = np.log(a.data)
    return _make("log", data, (a,), lambda g: (g / a.data,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    edges = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, edges, axis=axis))

    return _make("concat", data, parts, vjp)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    data = a.data[..., start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _make("slice", data, (a,), vjp)


# ---------------------------------------------------------------------------
# activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _sigmoid(a.data)
    return _make("sigmoid", data, (a,), lambda g: (g * data * (1.0 - data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x): smooth member of the relu family, so finite differences behave."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    data = a.data * s
    return _make("silu", data, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _make("softplus", data, (a,), lambda g: (g * _sigmoid(a.data),))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make("softmax", p, (a,), vjp)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    data = _log_softmax(a.data)
    p = np.exp(data)
    return _make("log_softmax", data, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] == 0:
        raise ValueError("empty normalization axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make("layer_norm", data, (x, gain, bias), vjp)


def embedding(table, indices) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("embedding index out of range")
    data = table.data[idx]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding", data, (table,), vjp)


def dropout(x, rate: float, rng: np.random.Generator | None = None, train: bool = True,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout. Pass ``mask`` to replay a fixed pattern."""
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if mask is None:
        mask = rng.random(x.shape) >= rate
    scale = mask / (1.0 - rate)
    return _make("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def mix_rows(weights, mats: np.ndarray) -> Tensor:
    """Per-row vector-matrix product with constant matrices: out[b] = weights[b] @ mats[b]."""
    weights = as_tensor(weights)
    data = np.einsum("ba,bac->bc", weights.data, mats)
    return _make("mix_rows", data, (weights,), lambda g: (np.einsum("bc,bac->ba", g, mats),))


def log_mix(logits, log_mats: np.ndarray) -> Tensor:
    """log(softmax(logits)[b] @ exp(log_mats[b])) evaluated stably in log space.

    ``log_mats`` may contain -inf (structural zeros) as long as every output
    column has at least one finite entry.
    """
    logits = as_tensor(logits)
    lsp = _log_softmax(logits.data)
    terms = lsp[:, :, None] + log_mats
    m = terms.max(axis=1, keepdims=True)
    w = np.exp(terms - m)
    tot = w.sum(axis=1, keepdims=True)
    data = (m + np.log(tot))[:, 0, :]
    w = w / tot  # responsibility of each clean class for each output column
    p = np.exp(lsp)

    def vjp(g):
        g_lsp = np.einsum("bc,bac->ba", g, w)
        return (g_lsp - p * g_lsp.sum(axis=-1, keepdims=True),)

    return _make("log_mix", data, (logits,), vjp)


# ---------------------------------------------------------------------------
# losses

def categorical_kl(p, q_logits) -> Tensor:
    """KL(p || softmax(q_logits)), with 0 ln 0 = 0. Rows are averaged for 2-D input."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    q_logits = as_tensor(q_logits)
    if p.shape != q_logits.shape:
        raise ValueError("categorical_kl: shape mismatch")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("invalid distribution")
    lq = _log_softmax(q_logits.data)
    pos = p > 0
    plogp = np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0)
    per_row = (plogp - p * lq).sum(axis=-1)
    rows = 1 if p.ndim == 1 else p.shape[0]
    data = np.asarray(per_row.mean())
    q = np.exp(lq)

    def vjp(g):
        # d/dlogits of -sum p log softmax = softmax * sum(p) - p
        return ((q * p.sum(axis=-1, keepdims=True) - p) * (g / rows),)

    return _make("categorical_kl", data, (q_logits,), vjp)


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValueError("mse: shape mismatch")
    diff = pred.data - target
    n = diff.size
    return _make("mse", np.asarray((diff * diff).mean()), (pred,), lambda g: (2.0 * diff * g / n,))


BCE_EPS = 1e-7


def bce(prob, target) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1-eps]."""
    prob = as_tensor(prob)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if target.shape != prob.shape:
        raise ValueError("bce: shape mismatch")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("bce target must be binary")
    pc = np.clip(prob.data, BCE_EPS, 1.0 - BCE_EPS)
    inside = (prob.data >= BCE_EPS) & (prob.data <= 1.0 - BCE_EPS)
    n = pc.size
    data = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc)).mean()

    def vjp(g):
        return (inside * (pc - target) / (pc * (1.0 - pc)) * g / n,)

    return _make("bce", np.asarray(data), (prob,), vjp)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
               floor: float = 1e-6, entries: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must rebuild its graph from ``inputs`` on every call (and replay any
    randomness itself). Relative error is |a - n| / max(|a|, |n|, floor).
    With ``entries`` set, only that many coordinates per input are probed: the
    one with the largest analytic gradient plus a seeded random draw.
    """
    inputs = list(inputs)
    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = range(flat.size)
        if entries is not None and flat.size > entries:
            top = int(np.argmax(np.abs(gflat)))
            rest = np.delete(np.arange(flat.size), top)
            pick = np.random.default_rng(seed).choice(rest, entries - 1, replace=False)
            idx = sorted([top, *pick.tolist()])
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*inputs).item()
            flat[i] = orig - h
            fm = f(*inputs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    for t, rg in zip(inputs, saved):
        t.requires_grad = rg
        t.grad = None
    return worst

"""Dense tensors with reverse-mode gradients for the fixed encoder op set.

Only the operations the encoder needs are differentiable. There is no
general broadcasting; applying a vector row-wise is the single exception,
and every other shape mismatch is a hard error. Gradients accumulate with
+= into ``grad`` and must be zeroed explicitly between optimizer steps,
which is what makes gradient accumulation across microbatches exact.

Storage is float32 by default with a float64 switch for oracle tests
(``use_dtype(np.float64)``). A NaN or Inf anywhere in an operation result
is an error state and raises :class:`NumericError` while finite checks are
enabled (the default).
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, InputError, NumericError

# Label value marking positions that do not contribute to the masked loss.
# Distinct from every token id (ids are nonnegative).
IGNORE_INDEX = -100

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_FINITE_CHECKS = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"default dtype must be float32 or float64, got {dt}")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default storage dtype (oracle mode uses float64)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward passes only."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    return data


class Tensor:
    """Dense array plus an optional accumulated gradient.

    ``grad`` is created lazily on first accumulation and has the same shape
    and dtype as ``data``. Non-leaf tensors participate in a backward graph
    built while grads are enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        target = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
        if arr.dtype != target:
            arr = arr.astype(target)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def backward(self, grad=None) -> None:
        """Accumulate gradients of a scalar (or of ``grad``-weighted output)."""
        if grad is None:
            if self.data.size != 1:
                raise InputError("backward() without an explicit grad requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"seed grad shape {grad.shape} != tensor shape {self.data.shape}"
                )
        order = _topological_order(self)
        _accumulate(self, grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        _set_backward(out, backward)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _set_backward(out: Tensor, fn) -> None:
    """Attach a backward closure only when the node participates in a graph."""
    if out.requires_grad:
        out._backward = fn


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}"
        )
    out_data = _checked(a.data @ b.data, "matmul")
    out = _make(out_data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    _set_backward(out, backward)
    return out


def transpose(t: Tensor) -> Tensor:
    _require_2d(t, "transpose")
    out = _make(t.data.T, (t,), None)

    def backward():
        _accumulate(t, out.grad.T)

    _set_backward(out, backward)
    return out


def reshape(t: Tensor, shape) -> Tensor:
    out_data = t.data.reshape(shape)
    out = _make(out_data, (t,), None)

    def backward():
        _accumulate(t, out.grad.reshape(t.data.shape))

    _set_backward(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(_checked(a.data + b.data, "add"), (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad)
        if b.requires_grad:
            _accumulate(b, out.grad)

    _set_backward(out, backward)
    return out


def add_row_vector(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an [n, d] tensor."""
    _require_2d(a, "add_row_vector")
    if v.data.ndim != 1 or v.data.shape[0] != a.data.shape[1]:
        raise DimensionError(
            f"row vector shape {v.data.shape} does not match columns of {a.data.shape}"
        )
    out = _make(_checked(a.data + v.data[None, :], "add_row_vector"), (a, v), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad)
        if v.requires_grad:
            _accumulate(v, out.grad.sum(axis=0))

    _set_backward(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _make(_checked(a.data * b.data, "mul"), (a, b), None)

    def backward():
        if a.requires_grad:
            _accumulate(a, out.grad * b.data)
        if b.requires_grad:
            _accumulate(b, out.grad * a.data)

    _set_backward(out, backward)
    return out


def scale(t: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar."""
    factor = float(factor)
    out = _make(_checked(t.data * factor, "scale"), (t,), None)

    def backward():
        _accumulate(t, out.grad * factor)

    _set_backward(out, backward)
    return out


def sum_all(t: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    out_data = np.asarray(t.data.sum(dtype=t.data.dtype))
    out = _make(_checked(out_data, "sum_all"), (t,), None)

    def backward():
        _accumulate(t, np.broadcast_to(out.grad, t.data.shape).astype(t.data.dtype))

    _set_backward(out, backward)
    return out


def split_columns(t: Tensor, parts: int) -> tuple[Tensor, ...]:
    """Split the last 2-D axis into equal contiguous column blocks."""
    _require_2d(t, "split_columns")
    n, d = t.data.shape
    if parts <= 0 or d % parts != 0:
        raise DimensionError(f"cannot split {d} columns into {parts} equal parts")
    width = d // parts
    outs = []
    for i in range(parts):
        sl = slice(i * width, (i + 1) * width)
        seg = _make(np.ascontiguousarray(t.data[:, sl]), (t,), None)

        def backward(sl=sl, seg=seg):
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad[:, sl] += seg.grad

        _set_backward(seg, backward)
        outs.append(seg)
    return tuple(outs)


def gelu(t: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x) with the erf-based CDF."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _make(_checked((x * cdf).astype(x.dtype), "gelu"), (t,), None)

    def backward():
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        _accumulate(t, out.grad * (cdf + x * pdf).astype(x.dtype))

    _set_backward(out, backward)
    return out


def layer_norm(t: Tensor, gamma: Tensor, eps: float) -> Tensor:
    """Row-wise mean-0/var-1 normalization scaled by gamma; no bias exists."""
    _require_2d(t, "layer_norm")
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    n, d = t.data.shape
    if d == 0:
        raise DimensionError("layer_norm over zero features")
    if gamma.data.shape != (d,):
        raise DimensionError(
            f"gamma shape {gamma.data.shape} does not match feature size {d}"
        )
    x = t.data
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = _make(_checked((xhat * gamma.data[None, :]).astype(x.dtype), "layer_norm"), (t, gamma), None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=0))
        if t.requires_grad:
            gx = g * gamma.data[None, :]
            # dL/dx for xhat = (x - mean) / sqrt(var + eps)
            mean_gx = gx.mean(axis=1, keepdims=True)
            mean_gx_xhat = (gx * xhat).mean(axis=1, keepdims=True)
            dx = inv_std * (gx - mean_gx - xhat * mean_gx_xhat)
            _accumulate(t, dx.astype(x.dtype))

    _set_backward(out, backward)
    return out


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    _require_2d(t, "softmax_rows")
    x = t.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = _make(_checked(p.astype(x.dtype), "softmax_rows"), (t,), None)

    def backward():
        g = out.grad
        inner = (g * p).sum(axis=1, keepdims=True)
        _accumulate(t, (p * (g - inner)).astype(x.dtype))

    _set_backward(out, backward)
    return out


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table by token id."""
    _require_2d(table, "embedding_lookup")
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError(f"ids must be 1-D, got shape {ids.shape}")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InputError(f"token id out of range for vocab {vocab}")
    out = _make(table.data[ids], (table,), None)

    def backward():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, out.grad)

    _set_backward(out, backward)
    return out


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate < 0 or rate >= 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return t
    keep = (rng.random(t.data.shape) >= rate).astype(t.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out = _make(_checked(t.data * keep * factor, "dropout"), (t,), None)

    def backward():
        _accumulate(t, out.grad * keep * factor)

    _set_backward(out, backward)
    return out


def cross_entropy_masked(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood over non-ignored positions.

    ``labels`` holds one token id per row or IGNORE_INDEX. ``reduction`` is
    "mean" (default, per the loss contract) or "sum" (used by the trainer to
    make gradient accumulation across microbatches exactly linear).
    """
    _require_2d(logits, "cross_entropy_masked")
    labels = np.asarray(labels, dtype=np.int64)
    n, vocab = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    active = labels != IGNORE_INDEX
    count = int(active.sum())
    if count == 0:
        raise InputError("cross_entropy_masked: every label is ignored")
    picked = labels[active]
    if picked.min() < 0 or picked.max() >= vocab:
        raise InputError(f"label id out of range for vocab {vocab}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")

    rows = logits.data[active]
    row_max = rows.max(axis=1, keepdims=True)
    shifted = rows - row_max
    lse = np.log(np.exp(shifted).sum(axis=1)) + row_max[:, 0]
    nll = lse - rows[np.arange(count), picked]
    total = nll.sum(dtype=logits.data.dtype)
    if reduction == "mean":
        total = total / count
    out = _make(_checked(np.asarray(total, dtype=logits.data.dtype), "cross_entropy_masked"), (logits,), None)

    def backward():
        if not logits.requires_grad:
            return
        g = float(out.grad)
        probs = np.exp(shifted - (lse - row_max[:, 0])[:, None])
        probs[np.arange(count), picked] -= 1.0
        if reduction == "mean":
            probs *= g / count
        else:
            probs *= g
        full = np.zeros_like(logits.data)
        full[active] = probs
        _accumulate(logits, full)

    _set_backward(out, backward)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def grad_check(op, inputs, tolerance=None, h: float = 1e-5, seed: int = 0,
               max_elements: int | None = None) -> float:
    """Compare analytic gradients of ``op`` against central finite differences.

    ``op`` must be a pure function of the given float64 tensors returning a
    Tensor of any shape; non-scalar outputs are reduced with a fixed random
    projection so the full Jacobian is exercised. Returns the worst relative
    error over all checked input elements. When ``tolerance`` is given, a
    worse error raises :class:`NumericError`.

    ``max_elements`` caps the number of elements checked per input (seeded
    subsample) so end-to-end model checks stay fast.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigError("grad_check requires float64 inputs (64-bit mode)")
        t.requires_grad = True
        t.zero_grad()

    rng = np.random.default_rng(seed)

    out = op(*inputs)
    if out.data.size == 1:
        projection = None
        loss = out
    else:
        projection = Tensor(rng.standard_normal(out.data.shape), dtype=np.float64)
        loss = sum_all(mul(out, projection))
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    def eval_loss() -> float:
        with no_grad():
            o = op(*inputs)
            if projection is None:
                value = o.data.item()
            else:
                value = float((o.data * projection.data).sum())
        if not math.isfinite(value):
            raise NumericError("grad_check: non-finite intermediate value")
        return value

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
            idx.sort()
        a_flat = a.reshape(-1)
        for i in idx:
            original = flat[i]
            flat[i] = original + h
            plus = eval_loss()
            flat[i] = original - h
            minus = eval_loss()
            flat[i] = original
            fd = (plus - minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(fd), 1e-6)
            worst = max(worst, abs(a_flat[i] - fd) / denom)
    if tolerance is not None and worst > tolerance:
        raise NumericError(f"grad_check failed: {worst:.3e} > {tolerance:.1e}")
    return worst

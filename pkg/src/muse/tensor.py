"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Forward ops compute with numpy and append one node per op to the innermost
active Tape.  Nodes are recorded in execution order, which is a topological
order of the graph by construction, so the backward pass is a single reverse
sweep that visits each node exactly once.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "ConfigError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "add_colvec",
    "add_const",
    "add_rowvec",
    "add_to_rows",
    "backward_pass",
    "bmm",
    "concat_cols",
    "concat_rows",
    "cross_entropy_logits",
    "embedding_lookup",
    "gather_1d",
    "gather_rows_cols",
    "gelu",
    "grad_check",
    "layer_norm",
    "logsumexp_all",
    "logsumexp_axis0",
    "matmul",
    "mean_all",
    "mean_rows",
    "mul",
    "mul_const",
    "neg",
    "permute",
    "reshape",
    "scale",
    "softmax_rows",
    "sub",
    "sum_all",
    "take_rows",
    "transpose2",
]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


_tapes = threading.local()


def _stack() -> list:
    stack = getattr(_tapes, "stack", None)
    if stack is None:
        stack = []
        _tapes.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of op nodes for one forward pass.

    Confined to a single thread.  Each node is (op name, output tensor,
    input tensors, backward rule); the recording order guarantees every
    node's inputs were produced by earlier nodes or are leaves.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[str, "Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """Dense float64 array in row-major order, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _record(name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append((name, out, inputs, backward))
    return out


def backward_pass(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into .grad for every leaf reachable in the tape.

    Seeds root with 1, sweeps the node list once in reverse, and zero-fills
    gradients of recorded leaves the root does not depend on.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward_pass root must be a scalar, got shape {root.shape}")
    root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
    produced = {id(node[1]) for node in tape.nodes}
    for _name, out, inputs, backward in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        for inp, gi in zip(inputs, backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                gi = np.asarray(gi)
                # ascontiguousarray would promote 0-d gradients to shape (1,)
                inp.grad = gi if gi.ndim == 0 else np.ascontiguousarray(gi)
            else:
                inp.grad = inp.grad + gi
    for _name, _out, inputs, _backward in tape.nodes:
        for inp in inputs:
            if inp.requires_grad and inp.grad is None and id(inp) not in produced:
                inp.grad = np.zeros_like(inp.data)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def add_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (treated as data, not a differentiable input)."""
    c = np.asarray(c, dtype=np.float64)
    if a.shape != c.shape:
        raise ShapeError(f"add_const shape mismatch: {a.shape} vs {c.shape}")
    return _record("add_const", a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply elementwise by a constant array (e.g. a dropout mask)."""
    c = np.asarray(c, dtype=np.float64)
    if a.shape != c.shape:
        raise ShapeError(f"mul_const shape mismatch: {a.shape} vs {c.shape}")
    return _record("mul_const", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the leading axis: (h,m,k) @ (h,k,p) -> (h,m,p)."""
    if (
        a.data.ndim != 3
        or b.data.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        "bmm",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g),
    )


def transpose2(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2 needs a matrix, got shape {a.shape}")
    return _record("transpose2", a.data.T, (a,), lambda g: (g.T,))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(i) for i in np.argsort(axes))
    return _record(
        "permute",
        np.transpose(a.data, axes),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
    in_shape = a.data.shape
    return _record(
        "reshape",
        a.data.reshape(shape),
        (a,),
        lambda g: (g.reshape(in_shape),),
    )


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"take_rows [{start}:{stop}] out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _record("take_rows", a.data[start:stop].copy(), (a,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows shape mismatch: {a.shape} vs {b.shape}")
    ra = a.shape[0]
    return _record(
        "concat_rows",
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:ra], g[ra:]),
    )


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    return _record(
        "concat_cols",
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def add_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ShapeError(f"add_rowvec shape mismatch: {m.shape} + {v.shape}")
    return _record(
        "add_rowvec",
        m.data + v.data[None, :],
        (m, v),
        lambda g: (g, g.sum(axis=0)),
    )


def add_colvec(m: Tensor, v: Tensor) -> Tensor:
    """Add v[i] to every entry of row i of an (n, d) matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"add_colvec shape mismatch: {m.shape} + {v.shape}")
    return _record(
        "add_colvec",
        m.data + v.data[:, None],
        (m, v),
        lambda g: (g, g.sum(axis=1)),
    )


def add_to_rows(m: Tensor, rows: Sequence[int], v: Tensor) -> Tensor:
    """Add vector v to the listed rows only; all other rows are copied bit-for-bit."""
    if m.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ShapeError(f"add_to_rows shape mismatch: {m.shape} + {v.shape}")
    rows = [int(r) for r in rows]
    if len(set(rows)) != len(rows):
        raise ShapeError(f"add_to_rows got duplicate row indices {rows}")
    for r in rows:
        if not 0 <= r < m.shape[0]:
            raise ShapeError(f"add_to_rows row {r} out of range for {m.shape[0]} rows")
    out = m.data.copy()
    if rows:
        out[rows] += v.data[None, :]

    def backward(g):
        gv = g[rows].sum(axis=0) if rows else np.zeros_like(v.data)
        return (g, gv)

    return _record("add_to_rows", out, (m, v), backward)


def mean_rows(m: Tensor) -> Tensor:
    """Column means of an (n, d) matrix, returned as a length-d vector."""
    if m.data.ndim != 2 or m.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a non-empty matrix, got shape {m.shape}")
    n = m.shape[0]
    return _record(
        "mean_rows",
        m.data.mean(axis=0),
        (m,),
        lambda g: (np.broadcast_to(g / n, m.data.shape).copy(),),
    )


def sum_all(a: Tensor) -> Tensor:
    return _record(
        "sum_all",
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.data.shape).copy(),),
    )


def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    if size == 0:
        raise ShapeError("mean_all of an empty tensor")
    return _record(
        "mean_all",
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / size, a.data.shape).copy(),),
    )


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x)."""
    cdf = ndtr(x.data)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", x.data * cdf, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the running max."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _record("softmax_rows", s, (x,), backward)


def logsumexp_axis0(x: Tensor) -> Tensor:
    """log sum exp over rows of an (n, d) matrix, keeping shape (1, d)."""
    if x.data.ndim != 2:
        raise ShapeError(f"logsumexp_axis0 needs a matrix, got shape {x.shape}")
    m = x.data.max(axis=0, keepdims=True)
    e = np.exp(x.data - m)
    total = e.sum(axis=0, keepdims=True)
    out = m + np.log(total)
    soft = e / total
    return _record("logsumexp_axis0", out, (x,), lambda g: (soft * g,))


def logsumexp_all(x: Tensor) -> Tensor:
    """log sum exp over every entry, returned as a scalar."""
    m = x.data.max()
    e = np.exp(x.data - m)
    total = e.sum()
    soft = e / total
    return _record("logsumexp_all", np.asarray(m + np.log(total)), (x,), lambda g: (soft * g,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalisation with population variance, then affine gamma/beta."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gx_hat = g * gamma.data[None, :]
        m1 = gx_hat.mean(axis=1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gx_hat - m1 - xhat * m2)
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _record("layer_norm", xhat * gamma.data[None, :] + beta.data[None, :], (x, gamma, beta), backward)


def cross_entropy_logits(
    logits: Tensor,
    targets: Sequence[int],
    mask: Sequence[bool] | None = None,
) -> Tensor:
    """Mean negative log-softmax of the target class over unmasked rows.

    With every row masked the loss is exactly 0 and no gradient flows.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs a matrix, got shape {logits.shape}")
    n, c = logits.shape
    targets = [int(t) for t in targets]
    if len(targets) != n:
        raise ShapeError(f"cross_entropy_logits got {len(targets)} targets for {n} rows")
    if mask is None:
        keep = list(range(n))
    else:
        if len(mask) != n:
            raise ShapeError(f"cross_entropy_logits got {len(mask)} mask entries for {n} rows")
        keep = [i for i, m in enumerate(mask) if m]
    for i in keep:
        if not 0 <= targets[i] < c:
            raise IndexError(f"target class {targets[i]} out of range for {c} classes (row {i})")
    if not keep:
        return Tensor(0.0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logz
    rows = np.asarray(keep)
    cols = np.asarray([targets[i] for i in keep])
    loss = -log_probs[rows, cols].mean()

    def backward(g):
        probs = np.exp(log_probs[rows])
        probs[np.arange(len(rows)), cols] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = probs * (np.asarray(g).reshape(()) / len(rows))
        return (full,)

    return _record("cross_entropy_logits", np.asarray(loss), (logits,), backward)


def embedding_lookup(ids: Sequence[int], table: Tensor) -> Tensor:
    """Gather rows of an embedding table by token id."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup table must be a matrix, got shape {table.shape}")
    ids = [int(i) for i in ids]
    v = table.shape[0]
    for i in ids:
        if not 0 <= i < v:
            raise IndexError(f"token id {i} out of range for embedding table with {v} rows")
    idx = np.asarray(ids, dtype=np.intp)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("embedding_lookup", table.data[idx], (table,), backward)


def gather_1d(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Pick entries of a vector by index, as a vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"gather_1d needs a vector, got shape {x.shape}")
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < x.shape[0]:
            raise IndexError(f"index {i} out of range for vector of length {x.shape[0]}")
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("gather_1d", x.data[idx], (x,), backward)


def gather_rows_cols(x: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Pick entries x[rows[i], cols[i]] of a matrix, as a vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows_cols needs a matrix, got shape {x.shape}")
    rows = [int(r) for r in rows]
    cols = [int(c) for c in cols]
    if len(rows) != len(cols):
        raise ShapeError(f"gather_rows_cols got {len(rows)} rows but {len(cols)} cols")
    for r, c in zip(rows, cols):
        if not (0 <= r < x.shape[0] and 0 <= c < x.shape[1]):
            raise IndexError(f"entry ({r}, {c}) out of range for shape {x.shape}")
    ri = np.asarray(rows, dtype=np.intp)
    ci = np.asarray(cols, dtype=np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ri, ci), g)
        return (gx,)

    return _record("gather_rows_cols", x.data[ri, ci], (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between taped gradients of f and central differences.

    f must be a deterministic scalar-valued function of x.  The relative error
    of each coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"grad_check step h={h} outside [1e-5, 1e-2]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward_pass(tape, y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(probe.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(probe.data)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / denom))

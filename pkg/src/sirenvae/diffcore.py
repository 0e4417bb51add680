"""Minimal reverse-mode differentiation over 2-D float64 matrices.

Computation is define-by-run: while a :class:`Tape` is active on the current
thread, every primitive records itself, and :func:`backward` replays the
records in reverse to accumulate gradients for named :class:`Parameter`
leaves.  Outside a tape the same primitives evaluate without recording, which
is the no-grad path used for sampling and importance-weighted evaluation.

Everything is float64; any primitive producing a non-finite value raises
:class:`NonFiniteError` naming the operation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DiffError",
    "ShapeError",
    "NonFiniteError",
    "Var",
    "Parameter",
    "Tape",
    "as_var",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "softplus",
    "exp",
    "log",
    "log1p",
    "vsum",
    "vmean",
    "hstack",
    "clip",
    "masked_matmul",
    "masked_linear",
    "gaussian_logpdf",
    "custom_op",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class DiffError(RuntimeError):
    pass


class ShapeError(DiffError):
    pass


class NonFiniteError(DiffError):
    """A primitive produced inf/nan; message names the operation."""


_TLS = threading.local()


def _current_tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass (thread-confined)."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        if _current_tape() is not None:
            raise DiffError("tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False


class Var:
    """A 2-D float64 matrix, possibly recorded on a tape."""

    __slots__ = ("data", "_parents", "_backward", "_op", "_tape")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"Var requires a scalar or 2-D array, got shape {arr.shape}")
        self.data = arr
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Var({self._op}, shape={self.shape})"

    # Arithmetic sugar; scalars are promoted to (1,1) constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        if isinstance(c, Var):
            raise DiffError("division only by python scalars")
        return mul(self, 1.0 / float(c))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> "Var":
        return vsum(self, axis)

    def mean(self, axis: int | None = None) -> "Var":
        return vmean(self, axis)


class Parameter(Var):
    """Named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True))
        self.name = name
        self._op = "param"

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(data: np.ndarray, op: str, parents: tuple[Var, ...], backward_fn) -> Var:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite result in op {op!r}")
    out = Var(data)
    out._op = op
    tape = _current_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward_fn
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to a broadcast input's shape."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")
    return out


def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


# --- primitives -----------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, "matmul", (a, b), back)


def _ewise2(name: str, fwd, dfa, dfb):
    def op(a, b) -> Var:
        a, b = as_var(a), as_var(b)
        if not _broadcastable(a.shape, b.shape):
            raise ShapeError(f"{name} shapes {a.shape} vs {b.shape}")
        ad, bd = a.data, b.data
        out = fwd(ad, bd)

        def back(g):
            return (
                _unbroadcast(dfa(g, ad, bd), a.shape),
                _unbroadcast(dfb(g, ad, bd), b.shape),
            )

        return _record(out, name, (a, b), back)

    return op


add = _ewise2("add", lambda a, b: a + b, lambda g, a, b: g, lambda g, a, b: g)
sub = _ewise2("sub", lambda a, b: a - b, lambda g, a, b: g, lambda g, a, b: -g)
mul = _ewise2("mul", lambda a, b: a * b, lambda g, a, b: g * b, lambda g, a, b: g * a)


def neg(a) -> Var:
    a = as_var(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def _ewise1(name: str, fwd, dfx):
    def op(a) -> Var:
        a = as_var(a)
        out = fwd(a.data)
        return _record(out, name, (a,), lambda g: (g * dfx(a.data, out),))

    return op


tanh = _ewise1("tanh", np.tanh, lambda x, y: 1.0 - y * y)
softplus = _ewise1("softplus", lambda x: np.logaddexp(0.0, x), lambda x, y: 1.0 / (1.0 + np.exp(-x)))
exp = _ewise1("exp", np.exp, lambda x, y: y)
log = _ewise1("log", np.log, lambda x, y: 1.0 / x)
log1p = _ewise1("log1p", np.log1p, lambda x, y: 1.0 / (1.0 + x))


def vsum(a, axis: int | None = None) -> Var:
    """Sum over all entries (axis=None), columns (axis=0), or rows (axis=1)."""
    a = as_var(a)
    shape = a.shape
    if axis is None:
        out = a.data.sum().reshape(1, 1)
    elif axis in (0, 1):
        out = a.data.sum(axis=axis, keepdims=True)
    else:
        raise ShapeError(f"sum axis must be None, 0 or 1, got {axis}")

    def back(g):
        return (np.broadcast_to(g, shape),)

    return _record(out, "sum", (a,), back)


def vmean(a, axis: int | None = None) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(vsum(a, axis), 1.0 / n)


def hstack(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"hstack row mismatch {a.shape} vs {b.shape}")
    na = a.shape[1]

    def back(g):
        return g[:, :na], g[:, na:]

    return _record(np.hstack([a.data, b.data]), "hstack", (a, b), back)


def clip(a, lo: float, hi: float) -> Var:
    """Hard clamp; gradient passes only strictly inside (lo, hi)."""
    a = as_var(a)
    ad = a.data

    def back(g):
        return (g * ((ad > lo) & (ad < hi)),)

    return _record(np.clip(ad, lo, hi), "clip", (a,), back)


def masked_matmul(w, m: np.ndarray, x) -> Var:
    """(w (.) m) @ x with a constant 0/1 mask m; gradients to w are exactly
    zero wherever the mask is zero."""
    w, x = as_var(w), as_var(x)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != w.shape:
        raise ShapeError(f"mask {m.shape} does not match weight {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"masked_matmul {w.shape} @ {x.shape}")
    wm = w.data * m

    def back(g):
        return (g @ x.data.T) * m, wm.T @ g

    return _record(wm @ x.data, "masked_matmul", (w, x), back)


def masked_linear(x, w, m: np.ndarray, b) -> Var:
    """Batched masked affine map: x @ (w (.) m).T + b for row-sample x."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    m = np.asarray(m, dtype=np.float64)
    if m.shape != w.shape:
        raise ShapeError(f"mask {m.shape} does not match weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"masked_linear input {x.shape} vs weight {w.shape}")
    if b.shape != (1, w.shape[0]):
        raise ShapeError(f"bias must be (1, {w.shape[0]}), got {b.shape}")
    wm = w.data * m
    xd = x.data

    def back(g):
        return g @ wm, (g.T @ xd) * m, g.sum(axis=0, keepdims=True)

    return _record(xd @ wm.T + b.data, "masked_linear", (x, w, b), back)


def gaussian_logpdf(x, mu, logsigma) -> Var:
    """Elementwise log N(x; mu, exp(logsigma)^2); mu/logsigma may broadcast."""
    x, mu, logsigma = as_var(x), as_var(mu), as_var(logsigma)
    xd, md, sd = x.data, mu.data, logsigma.data
    if not (_broadcastable(xd.shape, md.shape) and _broadcastable(xd.shape, sd.shape)):
        raise ShapeError(
            f"gaussian_logpdf shapes x={xd.shape} mu={md.shape} logsigma={sd.shape}"
        )
    inv_var = np.exp(-2.0 * sd)
    diff = xd - md
    out = -0.5 * LOG_2PI - sd - 0.5 * diff * diff * inv_var

    def back(g):
        gx = -g * diff * inv_var
        return (
            _unbroadcast(gx, x.shape),
            _unbroadcast(-gx, mu.shape),
            _unbroadcast(g * (diff * diff * inv_var - 1.0), logsigma.shape),
        )

    return _record(out, "gaussian_logpdf", (x, mu, logsigma), back)


def custom_op(data: np.ndarray, op: str, parents: Iterable[Var], backward_fn) -> Var:
    """Record an externally defined primitive (used by the flow module)."""
    return _record(np.asarray(data, dtype=np.float64), op, tuple(parents), backward_fn)


# --- reverse pass ----------------------------------------------------------


def backward(tape: Tape, output: Var, params: Iterable[Parameter] = ()) -> dict[Parameter, np.ndarray]:
    """Accumulate d(output)/d(param) for every parameter in ``params``.

    ``output`` must be a scalar recorded on ``tape``; parameters the output
    does not depend on receive exact zero gradients.
    """
    if output._tape is not tape:
        raise DiffError("output was not recorded on this tape")
    if output.data.shape != (1, 1):
        raise ShapeError(f"backward requires a scalar output, got {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            store = grads if parent._tape is tape else leaf_grads
            key = id(parent)
            if key in store:
                store[key] = store[key] + pg
            else:
                store[key] = pg
    out: dict[Parameter, np.ndarray] = {}
    for p in params:
        g = leaf_grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g)
    return out


# --- finite-difference oracle ----------------------------------------------


@dataclass
class FiniteDiffEntry:
    param: str
    index: tuple[int, int]
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float


@dataclass
class FiniteDiffReport:
    entries: list[FiniteDiffEntry]
    rtol: float
    atol: float

    @property
    def failures(self) -> list[FiniteDiffEntry]:
        return [
            e
            for e in self.entries
            if e.abs_err > self.atol + self.rtol * max(abs(e.analytic), abs(e.numeric))
        ]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def __str__(self):
        state = "PASS" if self.passed else f"FAIL ({len(self.failures)} coords)"
        return (
            f"finite-diff check: {state}, {len(self.entries)} coordinates, "
            f"max rel err {self.max_rel_err:.3e}"
        )


def finite_diff_check(
    f: Callable[[], Var],
    params: Sequence[Parameter],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-8,
) -> FiniteDiffReport:
    """Compare backward() gradients of the scalar f() against central
    differences, coordinate by coordinate.

    ``f`` must be deterministic (freeze any noise draws) and must read the
    parameters' current ``data`` each call.
    """
    with Tape() as tape:
        out = f()
    grads = backward(tape, out, params)
    entries: list[FiniteDiffEntry] = []
    for p in params:
        flat = p.data.reshape(-1)
        gflat = grads[p].reshape(-1)
        rows, cols = p.shape
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_hi = f().item()
            flat[i] = orig - h
            f_lo = f().item()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * h)
            analytic = float(gflat[i])
            abs_err = abs(analytic - numeric)
            rel_err = abs_err / max(abs(analytic), abs(numeric), 1e-12)
            entries.append(
                FiniteDiffEntry(p.name, divmod(i, cols), analytic, numeric, abs_err, rel_err)
            )
    return FiniteDiffReport(entries, rtol, atol)

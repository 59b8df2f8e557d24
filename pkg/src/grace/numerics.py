"""Dense linear algebra, a symmetric eigensolver and a small reverse-mode tape.

Matrices are plain float64 numpy arrays. Differentiable values are wrapped in
:class:`Var`; operations between ``Var`` objects are recorded on the active
:class:`Tape` so that :meth:`Tape.backward` can propagate adjoints.

Every tape primitive accepts leading batch dimensions (numpy broadcasting
rules); gradients are reduced back to each input's shape.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "EigenResult",
    "ConvergenceError",
    "as_matrix",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "power",
    "transpose",
    "expand_dims",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "log",
    "absolute",
    "sym_eigen",
    "spectral_norm",
    "grad_check",
]


class ConvergenceError(RuntimeError):
    """An iterative routine ran out of budget before meeting its tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


def as_matrix(a) -> np.ndarray:
    """Coerce to a finite float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Var:
    """A value that may take part in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Op:
    kind: str
    inputs: tuple
    output: Var
    forward: Callable[..., np.ndarray]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations.

    Used as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended to :attr:`ops`.

    >>> x = Var(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = reduce_sum(x @ x)
    >>> tape.backward(y)
    >>> x.grad
    array([[4., 4.],
           [4., 4.]])
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, op: _Op) -> None:
        self.ops.append(op)

    def backward(self, output: Var, seed: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(input) into ``.grad`` of every leaf on the tape."""
        produced = {id(op.output) for op in self.ops}
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for op in reversed(self.ops):
            g_out = grads.pop(id(op.output), None)
            if g_out is None:
                continue
            for inp, g in zip(op.inputs, op.backward(g_out)):
                if g is None or not isinstance(inp, Var) or not inp.requires_grad:
                    continue
                g = _unbroadcast(g, inp.value.shape)
                if id(inp) in produced:
                    key = id(inp)
                    grads[key] = grads[key] + g if key in grads else g
                else:
                    inp.grad = g if inp.grad is None else inp.grad + g

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded op from its inputs' current values."""
        out = []
        for op in self.ops:
            vals = [i.value if isinstance(i, Var) else i for i in op.inputs]
            out.append(op.forward(*vals))
        return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _needs_grad(*xs) -> bool:
    return any(isinstance(x, Var) and x.requires_grad for x in xs)


def _emit(kind, inputs, forward, backward) -> Var:
    vals = [_val(x) for x in inputs]
    out = Var(forward(*vals))
    tape = _active_tape()
    if tape is not None and _needs_grad(*inputs):
        out.requires_grad = True
        tape.record(_Op(kind, tuple(inputs), out, forward, backward))
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Var:
    """Matrix product with shape checking; batched over leading axes."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} x {bv.shape}")

    def backward(g):
        return g @ _swap(bv), _swap(av) @ g

    return _emit("matmul", (a, b), np.matmul, backward)


def add(a, b) -> Var:
    return _emit("add", (a, b), np.add, lambda g: (g, g))


def sub(a, b) -> Var:
    return _emit("sub", (a, b), np.subtract, lambda g: (g, -g))


def mul(a, b) -> Var:
    """Elementwise (broadcasting) product."""
    av, bv = _val(a), _val(b)
    return _emit("mul", (a, b), np.multiply, lambda g: (g * bv, g * av))


def scale(a, c: float) -> Var:
    c = float(c)
    return _emit("scale", (a,), lambda x: x * c, lambda g: (g * c,))


def relu(a) -> Var:
    av = _val(a)
    keep = av > 0
    return _emit("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g: (g * keep,))


def power(a, p: float) -> Var:
    """Elementwise ``a ** p`` for strictly positive ``a``."""
    av = _val(a)
    if np.any(av <= 0):
        raise ValueError("power expects strictly positive input")
    return _emit("power", (a,), lambda x: x**p, lambda g: (g * p * av ** (p - 1),))


def transpose(a) -> Var:
    return _emit("transpose", (a,), _swap, lambda g: (_swap(g),))


def expand_dims(a, axis: int) -> Var:
    av = _val(a)
    return _emit(
        "expand_dims",
        (a,),
        lambda x: np.expand_dims(x, axis),
        lambda g: (g.reshape(av.shape),),
    )


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    av = _val(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Var:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Var:
    av = _val(a)

    def fwd(x):
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)

    s = fwd(av)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), fwd, backward)


def log(a, floor: float = 0.0) -> Var:
    """Natural log of ``max(a, floor)``; zero gradient where the floor binds."""
    av = _val(a)
    live = av > floor

    def fwd(x):
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(x, floor))

    return _emit("log", (a,), fwd, lambda g: (np.where(live, g / np.where(live, av, 1.0), 0.0),))


def absolute(a) -> Var:
    """Elementwise |a|; subgradient 0 at the kink."""
    av = _val(a)
    return _emit("abs", (a,), np.abs, lambda g: (g * np.sign(av),))


# ---------------------------------------------------------------------------
# symmetric eigensolver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenResult:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns
    sweeps: int
    off_norm: float


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of the circle method: n-1 rounds (n even) of disjoint pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            a, b = players[k], players[m - 1 - k]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _rotate_rows(x: np.ndarray, p, q, c, s) -> None:
    rp, rq = x[p], x[q]
    x[p] = c * rp - s * rq
    x[q] = s * rp + c * rq


def sym_eigen(m, tol: float = 1e-12, max_sweeps: int = 100) -> EigenResult:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    the rotations within a round touch disjoint rows and can be applied
    together. Iteration stops when the off-diagonal Frobenius norm drops to
    ``tol * max(1, ||m||_F)``.

    Raises
    ------
    ValueError
        If ``m`` is not square or not symmetric within 1e-9.
    ConvergenceError
        If ``max_sweeps`` is exhausted; ``.achieved`` carries the final
        off-diagonal norm.
    """
    a = as_matrix(m)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eigen needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale_ = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > 1e-9 * scale_:
        raise ValueError("sym_eigen needs a symmetric matrix")
    a = 0.5 * (a + a.T)
    vt = np.eye(n)
    target = tol * max(1.0, float(np.linalg.norm(a)))
    rounds = _round_robin(n) if n > 1 else []

    offmask = ~np.eye(n, dtype=bool)

    def off(x):
        return float(np.linalg.norm(x[offmask]))

    sweeps = 0
    current = off(a)
    while current > target:
        if sweeps == max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {current:.3e})",
                current,
            )
        for p, q in rounds:
            apq = a[p, q]
            live = apq != 0.0
            if not live.any():
                continue
            p, q, apq = p[live], q[live], apq[live]
            with np.errstate(over="ignore", divide="ignore"):
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(
                    theta == 0, 1.0, np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
                )
            # huge theta: t ~ 1/(2 theta), avoids inf/inf
            big = np.abs(theta) > 1e150
            t[big] = 0.5 / theta[big]
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J as two row rotations around a transpose (result is
            # symmetric); V is stored transposed so V <- V J is also a row update
            cc, ss = c[:, None], s[:, None]
            _rotate_rows(a, p, q, cc, ss)
            a = np.ascontiguousarray(a.T)
            _rotate_rows(a, p, q, cc, ss)
            a[p, q] = 0.0
            a[q, p] = 0.0
            _rotate_rows(vt, p, q, cc, ss)
        sweeps += 1
        current = off(a)

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return EigenResult(w[order], vt.T[:, order].copy(), sweeps, current)


def spectral_norm(m) -> float:
    """Largest singular value, from the eigensolve of the smaller Gram matrix."""
    a = as_matrix(m)
    if a.size == 0:
        return 0.0
    a = np.atleast_2d(a)
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    lam = sym_eigen(gram).eigenvalues[-1]
    return float(np.sqrt(max(lam, 0.0)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Var], Var], x, h: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f`` maps a :class:`Var` to a scalar :class:`Var`. The relative error of
    each entry uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    x0 = as_matrix(x)
    xv = Var(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xv)
    tape.backward(y)
    analytic = np.zeros_like(x0) if xv.grad is None else xv.grad

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for k in range(x0.size):
        vals = []
        for sign in (1.0, -1.0):
            xp = x0.copy().reshape(-1)
            xp[k] += sign * h
            fv = float(np.asarray(f(Var(xp.reshape(x0.shape))).value))
            if not np.isfinite(fv):
                raise ValueError(f"non-finite f at perturbation index {k} (sign {sign:+.0f})")
            vals.append(fv)
        flat[k] = (vals[0] - vals[1]) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def grad_check_many(f: Callable[[Sequence[Var]], Var], xs: Sequence, h: float = 1e-5) -> list[float]:
    """:func:`grad_check` over several parameter blocks, holding the rest fixed."""
    xs = [as_matrix(x) for x in xs]
    errs = []
    for i in range(len(xs)):
        def fi(v, i=i):
            args = [Var(x) for x in xs]
            args[i] = v
            return f(args)

        errs.append(grad_check(fi, xs[i], h))
    return errs

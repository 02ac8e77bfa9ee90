"""Minimal tape-based reverse-mode automatic differentiation.

A :class:`Tape` is an append-only list of nodes.  Each node stores the ids
of its inputs and a vector-Jacobian closure built by the forward function.
Complex values are supported; for a real loss ``L`` the gradient of a
complex value ``z`` is stored as ``dL/dRe(z) + 1j * dL/dIm(z)``.

Typical use::

    tape = Tape()
    w = tape.leaf(np.ones(3))
    loss = ops.sum(w * w)
    grads = tape.backward(loss)
    grads[w.id]
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .ndtensor import DEBUG, check_finite


class TapeError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


class Var:
    """Immutable value plus its position on a tape.

    ``id`` is None for constants and for values computed while nothing
    upstream required a gradient.
    """

    __slots__ = ("value", "tape", "id", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape=None, id=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.id = id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, id={self.id})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    vjp: Callable | None


class Tape:
    """Append-only record of differentiable operations.

    With ``enabled=False`` nothing is recorded and leaves never require a
    gradient, which makes the tape a cheap inference context.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind: str, inputs: Sequence[int], vjp) -> int:
        nid = len(self.nodes)
        if any(i >= nid or i < 0 for i in inputs):
            raise TapeError(f"node {nid} ({kind}) has inputs {tuple(inputs)} out of topological order")
        self.nodes.append(Node(nid, kind, tuple(inputs), vjp))
        return nid

    def leaf(self, value, requires_grad: bool = True, name: str | None = None) -> Var:
        value = np.asarray(value)
        if value.dtype.kind not in "fc":
            value = value.astype(np.float64)
        check_finite(value, f"leaf {name or ''}".strip())
        if not (requires_grad and self.enabled):
            return Var(value, None, None, False, name)
        nid = self._append("leaf", (), None)
        return Var(value, self, nid, True, name)

    def record(self, kind: str, inputs: Sequence, forward: Callable) -> Var:
        """Run ``forward`` on the input values and append a node.

        ``forward(*values)`` returns ``(value, vjp)`` where ``vjp(g)``
        returns one gradient (or None) per input.  Non-Var inputs are
        treated as constants.
        """
        tracked = [x for x in inputs if isinstance(x, Var) and x.id is not None]
        for x in tracked:
            if x.tape is not self:
                raise TapeError(f"{kind}: input {x!r} belongs to a different tape")
        values = [x.value if isinstance(x, Var) else x for x in inputs]
        value, vjp = forward(*values)
        if DEBUG:
            check_finite(value, kind)
        if not (self.enabled and tracked):
            return Var(value)
        ids = tuple(x.id if isinstance(x, Var) and x.id is not None else -1 for x in inputs)
        nid = len(self.nodes)
        if any(i >= nid for i in ids):
            raise TapeError(f"{kind}: inputs out of topological order")
        self.nodes.append(Node(nid, kind, ids, vjp))
        return Var(value, self, nid, True)

    def backward(self, root: Var) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``root`` with respect to every tracked node."""
        if root.value.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.value.shape}")
        if root.id is None:
            return {}
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp < 0 or gi is None:
                    continue
                if inp >= node.id:
                    raise TapeError(f"node {node.id} feeds from later node {inp}")
                prev = grads.get(inp)
                grads[inp] = gi if prev is None else prev + gi
        return grads


def backward(tape: Tape, root: Var) -> dict[int, np.ndarray]:
    return tape.backward(root)


def grad_of(grads: dict, var: Var) -> np.ndarray:
    """Gradient for ``var`` (zeros if it did not influence the root)."""
    g = grads.get(var.id) if var.id is not None else None
    if g is None:
        return np.zeros_like(var.value)
    if not np.iscomplexobj(var.value):
        g = np.real(g)
    return g


@contextmanager
def no_grad():
    """Yield a tape that records nothing."""
    yield Tape(enabled=False)


class GradCheck(NamedTuple):
    passed: bool
    max_rel_err: float
    checked: int
    max_abs_err: float = 0.0


def finite_diff_check(
    f: Callable[[Var], Var],
    leaf,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheck:
    """Compare backward() against central differences.

    ``f`` maps a leaf Var to a scalar Var.  Coordinates whose absolute
    discrepancy is below ``abs_floor`` count as exact; otherwise the error
    is ``|analytic - numeric| / max(|analytic|, |numeric|)``.  With
    ``max_coords`` only a seeded random subset of coordinates is checked.
    For complex leaves the real and imaginary parts are perturbed separately.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(leaf.value if isinstance(leaf, Var) else leaf)
    if x0.dtype.kind not in "fc":
        x0 = x0.astype(np.float64)

    tape = Tape()
    var = tape.leaf(x0)
    root = f(var)
    analytic = tape.backward(root).get(var.id, np.zeros_like(x0))

    def evaluate(x):
        return float(np.real(f(Tape(enabled=False).leaf(x, requires_grad=False)).value).ravel()[0])

    base = evaluate(x0)
    if evaluate(x0) != base or base != float(np.real(root.value).ravel()[0]):
        raise NonDeterministicError("f gives different values on repeated evaluation")

    flat_idx = np.arange(x0.size)
    if max_coords is not None and max_coords < x0.size:
        flat_idx = np.sort(np.random.default_rng(seed).choice(x0.size, max_coords, replace=False))
    parts = [(1.0, np.real)]
    if np.iscomplexobj(x0):
        parts.append((1j, np.imag))

    worst = 0.0
    worst_abs = 0.0
    checked = 0
    for k in flat_idx:
        idx = np.unravel_index(k, x0.shape)
        for unit, part in parts:
            xp = x0.copy()
            xm = x0.copy()
            xp[idx] += unit * eps
            xm[idx] -= unit * eps
            numeric = (evaluate(xp) - evaluate(xm)) / (2 * eps)
            a = float(part(analytic[idx]))
            diff = abs(a - numeric)
            checked += 1
            worst_abs = max(worst_abs, diff)
            if diff <= abs_floor:
                continue
            worst = max(worst, diff / max(abs(a), abs(numeric)))
    return GradCheck(worst <= tol, worst, checked, worst_abs)

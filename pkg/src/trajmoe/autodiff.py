"""Minimal reverse-mode differentiation kernel on dense float64 arrays.

A forward pass records primitive operations on a :class:`Tape`; calling
:meth:`Tape.backward` replays them in exact reverse execution order and
accumulates vector-Jacobian products into every grad-tracked node. The op
set is deliberately small (dense linear maps, a few elementwise
nonlinearities, softmax, reductions, and structural ops) so the kernel
stays auditable. Everything is float64; there is no broadcasting beyond
matrix-vector and array-scalar.

Gradients through ODE solves are obtained by recording the unrolled
fixed-step integrator on the tape (discretize-then-optimize), so the
backward pass differentiates the exact discrete loss.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteDetected, ShapeMismatch, TapeConsumed


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_value(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    # inverse of log(1+exp(x)); y must be > 0
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class Node:
    """One value in the recorded computation. ``grad`` is filled by backward."""

    __slots__ = ("value", "grad", "tape", "requires", "_vjp", "kind")

    def __init__(self, value, tape, requires, vjp=None, kind="const"):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires = requires
        self._vjp = vjp
        self.kind = kind

    @property
    def shape(self):
        return self.value.shape

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g


class Tape:
    """Ordered record of one forward pass.

    ``grad=False`` builds a value-only pass (no closures, nothing to replay);
    ``strict=True`` raises NonFiniteDetected as soon as a primitive produces
    a non-finite value. A tape supports a single backward call.
    """

    def __init__(self, grad: bool = True, strict: bool = False):
        self.nodes: list[Node] = []
        self.grad_enabled = grad
        self.strict = strict
        self._consumed = False

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64), self, requires=False, kind="const")

    def leaf(self, value) -> Node:
        n = Node(np.asarray(value, dtype=np.float64), self, requires=self.grad_enabled, kind="leaf")
        if self.grad_enabled:
            self.nodes.append(n)
        return n

    def _record(self, value, parents, vjp, kind) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if self.strict and not np.all(np.isfinite(value)):
            raise NonFiniteDetected(f"non-finite value produced by op '{kind}'")
        requires = self.grad_enabled and any(p.requires for p in parents)
        node = Node(value, self, requires, vjp if requires else None, kind)
        if requires:
            self.nodes.append(node)
        return node

    def backward(self, out: Node, upstream=None) -> None:
        """Seed ``out`` with ``upstream`` (default: ones) and accumulate
        gradients into every recorded node reachable from it."""
        if self._consumed:
            raise TapeConsumed("tape already replayed; build a fresh forward pass")
        self._consumed = True
        if upstream is None:
            upstream = np.ones_like(out.value)
        out.add_grad(np.asarray(upstream, dtype=np.float64))
        for node in reversed(self.nodes):
            if node.grad is None or node._vjp is None:
                continue
            node._vjp(node.grad)


def _wrap(tape: Tape, x):
    return x if isinstance(x, Node) else tape.constant(x)


def _fail(kind, *shapes):
    raise ShapeMismatch(f"{kind}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Node, b) -> Node:
    tape = a.tape
    b = _wrap(tape, b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            _fail("matmul", av.shape, bv.shape)
    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            _fail("matmul", av.shape, bv.shape)
    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            _fail("matmul", av.shape, bv.shape)
    else:
        _fail("matmul", av.shape, bv.shape)
    value = av @ bv

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 2:
            if a.requires:
                a.add_grad(g @ bv.T)
            if b.requires:
                b.add_grad(av.T @ g)
        elif av.ndim == 2 and bv.ndim == 1:
            if a.requires:
                a.add_grad(np.outer(g, bv))
            if b.requires:
                b.add_grad(av.T @ g)
        else:  # (k,) @ (k,n)
            if a.requires:
                a.add_grad(bv @ g)
            if b.requires:
                b.add_grad(np.outer(av, g))

    return tape._record(value, (a, b), vjp, "matmul")


def _addlike(a: Node, b, sign: float, kind: str) -> Node:
    tape = a.tape
    b = _wrap(tape, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        mode = "same"
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        mode = "rowvec"
    elif bv.ndim == 0:
        mode = "scalar"
    elif av.ndim == 0 and bv.ndim >= 1:
        mode = "lscalar"
    else:
        _fail(kind, av.shape, bv.shape)
    value = av + sign * bv

    def vjp(g):
        if a.requires:
            a.add_grad(np.sum(g) if mode == "lscalar" else g)
        if b.requires:
            if mode == "same":
                gb = g
            elif mode == "rowvec":
                gb = g.sum(axis=0)
            elif mode == "scalar":
                gb = np.sum(g)
            else:
                gb = g
            b.add_grad(sign * gb)

    return tape._record(value, (a, b), vjp, kind)


def add(a: Node, b) -> Node:
    return _addlike(a, b, 1.0, "add")


def sub(a: Node, b) -> Node:
    return _addlike(a, b, -1.0, "sub")


def scale(a: Node, s: float) -> Node:
    """Multiply by a plain (non-differentiated) Python scalar."""
    s = float(s)
    value = a.value * s

    def vjp(g):
        if a.requires:
            a.add_grad(g * s)

    return a.tape._record(value, (a,), vjp, "scale")


def hadamard(a: Node, b) -> Node:
    tape = a.tape
    b = _wrap(tape, b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        mode = "same"
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[0] == bv.shape[0]:
        mode = "colvec"  # scale row i by b[i]
    elif bv.ndim == 0 or av.ndim == 0:
        mode = "scalar"
    else:
        _fail("hadamard", av.shape, bv.shape)
    if mode == "colvec":
        value = av * bv[:, None]
    else:
        value = av * bv

    def vjp(g):
        if a.requires:
            if mode == "same":
                a.add_grad(g * bv)
            elif mode == "colvec":
                a.add_grad(g * bv[:, None])
            elif av.ndim == 0:
                a.add_grad(np.sum(g * bv))
            else:
                a.add_grad(g * bv)
        if b.requires:
            if mode == "same":
                b.add_grad(g * av)
            elif mode == "colvec":
                b.add_grad((g * av).sum(axis=1))
            elif bv.ndim == 0:
                b.add_grad(np.sum(g * av))
            else:
                b.add_grad(g * av)

    return tape._record(value, (a, b), vjp, "hadamard")


def _elementwise(a: Node, fn, dfn, kind: str) -> Node:
    value = fn(a.value)

    def vjp(g):
        if a.requires:
            a.add_grad(g * dfn(a.value, value))

    return a.tape._record(value, (a,), vjp, kind)


def tanh(a: Node) -> Node:
    return _elementwise(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def sigmoid(a: Node) -> Node:
    return _elementwise(a, _sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")


def softplus(a: Node) -> Node:
    return _elementwise(a, softplus_value, lambda x, y: _sigmoid(x), "softplus")


def relu(a: Node) -> Node:
    return _elementwise(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


def sqrt(a: Node) -> Node:
    # zero-subgradient convention at 0 keeps norms of identically-zero
    # stacks differentiable at init
    def dfn(x, y):
        with np.errstate(divide="ignore"):
            d = np.where(y > 0.0, 0.5 / np.where(y > 0.0, y, 1.0), 0.0)
        return d

    return _elementwise(a, np.sqrt, dfn, "sqrt")


def reciprocal(a: Node) -> Node:
    return _elementwise(a, lambda x: 1.0 / x, lambda x, y: -y * y, "reciprocal")


def softmax(a: Node) -> Node:
    if a.value.ndim != 1:
        _fail("softmax", a.value.shape)
    z = a.value - np.max(a.value)
    e = np.exp(z)
    value = e / e.sum()

    def vjp(g):
        if a.requires:
            a.add_grad(value * (g - float(np.dot(g, value))))

    return a.tape._record(value, (a,), vjp, "softmax")


def reduce_sum(a: Node) -> Node:
    value = np.asarray(a.value.sum())

    def vjp(g):
        if a.requires:
            a.add_grad(np.full_like(a.value, float(g)))

    return a.tape._record(value, (a,), vjp, "reduce-sum")


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        _fail("transpose", a.value.shape)

    def vjp(g):
        if a.requires:
            a.add_grad(g.T)

    return a.tape._record(a.value.T, (a,), vjp, "transpose")


def reshape(a: Node, shape) -> Node:
    old = a.value.shape

    def vjp(g):
        if a.requires:
            a.add_grad(g.reshape(old))

    return a.tape._record(a.value.reshape(shape), (a,), vjp, "reshape")


def concat_cols(*parts: Node) -> Node:
    """Column-concatenate vectors (treated as single columns) and matrices
    sharing the same number of rows."""
    tape = parts[0].tape
    rows = parts[0].value.shape[0]
    cols = []
    widths = []
    for p in parts:
        v = p.value
        if v.shape[0] != rows or v.ndim > 2:
            _fail("concat-cols", *(q.value.shape for q in parts))
        if v.ndim == 1:
            cols.append(v[:, None])
            widths.append(1)
        else:
            cols.append(v)
            widths.append(v.shape[1])
    value = np.concatenate(cols, axis=1)

    def vjp(g):
        off = 0
        for p, w in zip(parts, widths):
            chunk = g[:, off:off + w]
            if p.requires:
                p.add_grad(chunk[:, 0] if p.value.ndim == 1 else chunk)
            off += w

    return tape._record(value, parts, vjp, "concat-cols")


def lift(tape: Tape, value, parents, vjp_fn, kind="custom") -> Node:
    """Record an externally computed value with a caller-supplied VJP.

    ``vjp_fn(upstream)`` must return one gradient per parent (None to skip).
    Used to fuse hand-differentiated blocks (e.g. the mechanistic
    reaction-diffusion field) into a recorded pass.
    """

    def vjp(g):
        grads = vjp_fn(g)
        for p, pg in zip(parents, grads):
            if pg is not None and p.requires:
                p.add_grad(pg)

    return tape._record(value, tuple(parents), vjp, kind)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "hadamard": hadamard,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "softmax": softmax,
    "reduce-sum": reduce_sum,
}


def forward_primitive(kind: str, *inputs):
    """Dispatch one primitive by kind name. Inputs may be Nodes or arrays;
    at least one Node fixes the tape."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ShapeMismatch(f"unknown primitive kind '{kind}'")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# parameter storage


class ParamStore:
    """Named dense float64 arrays with a flat-vector view for the optimizer.

    Flat order is name insertion order; it is part of the persisted
    contract (checkpoints store names, shapes and row-major values).
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._arrays:
            raise KeyError(f"parameter '{name}' already exists")
        self._arrays[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        ref = self._arrays[name]
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != ref.shape:
            raise ShapeMismatch(f"parameter '{name}': shape {arr.shape} != {ref.shape}")
        self._arrays[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeMismatch(f"flat vector length {vec.shape} != ({self.size},)")
        off = 0
        for k, v in self._arrays.items():
            self._arrays[k] = vec[off:off + v.size].reshape(v.shape).copy()
            off += v.size

    def flat_slices(self) -> dict[str, slice]:
        out, off = {}, 0
        for k, v in self._arrays.items():
            out[k] = slice(off, off + v.size)
            off += v.size
        return out

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for k, v in self._arrays.items():
            dup.add(k, v)
        return dup

    def items(self):
        return self._arrays.items()


def bind_params(tape: Tape, store: ParamStore) -> dict[str, Node]:
    """Create one grad-tracked leaf per stored parameter."""
    return {name: tape.leaf(value) for name, value in store.items()}


def collect_grads(leaves: dict[str, "Node"]) -> dict[str, np.ndarray]:
    """Post-backward gradients by name; parameters untouched by the loss get zeros."""
    return {
        name: (node.grad if node.grad is not None else np.zeros_like(node.value))
        for name, node in leaves.items()
    }


def grads_flat(store: ParamStore, leaves: dict[str, "Node"]) -> np.ndarray:
    g = collect_grads(leaves)
    if not g:
        return np.zeros(0)
    return np.concatenate([g[name].ravel() for name in store.names()])

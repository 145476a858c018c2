"""Reverse-mode automatic differentiation on a flat tape.

Small, purpose-built: enough scalar/matrix primitives to push gradients
through network inference and the closed-form kinematic rollout.  Values
are float64 numpy arrays; primitives broadcast like numpy and the reverse
pass sums gradients back over broadcast dimensions.

Primitives: add, sub, mul, matmul, transpose, reshape, concat, slice,
where, sum, sin, cos, sqrt, reciprocal, relu, affine, hat, huber, and a
dedicated group logarithm (lie_log) whose reverse rule uses the inverse
left Jacobian; everything else is composed from these.

A tape is confined to the execution context that created it; gradient maps
from different tapes can be merged by deterministic ordered reduction.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .liegroup import se23_left_jacobian

_NODE = "n"
_CONST = "c"


class Node:
    """One recorded value; gradient accumulator filled in by backward()."""

    __slots__ = ("tape", "idx", "value", "grad")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Ordered list of primitive records in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        # per-node: (op_name, operand_specs, params) or None for leaves
        self.records: list = []

    def leaf(self, value) -> Node:
        """Register an input (parameter or constant-with-gradient)."""
        return self._append(None, np.asarray(value, dtype=float))

    def _append(self, record, value) -> Node:
        node = Node(self, len(self.nodes), value)
        self.nodes.append(node)
        self.records.append(record)
        return node

    def record(self, op: str, inputs, params=None) -> Node:
        """Record one primitive application and compute its value.

        ``inputs`` may mix Node objects and raw arrays/scalars; raw values
        are treated as constants (no gradient).
        """
        if op not in _FORWARD:
            raise InvalidArgumentError(f"unknown primitive {op!r}")
        specs = []
        values = []
        for x in inputs:
            if isinstance(x, Node):
                if x.tape is not self:
                    raise InvalidArgumentError("node belongs to a different tape")
                specs.append((_NODE, x.idx))
                values.append(x.value)
            else:
                arr = np.asarray(x, dtype=float)
                specs.append((_CONST, arr))
                values.append(arr)
        value = _FORWARD[op](params, *values)
        return self._append((op, tuple(specs), params), value)

    def replay(self) -> list:
        """Recompute every node from the leaves; returns recomputed values.

        Deterministic: replaying reproduces the recorded values bit-exactly.
        """
        out = []
        for node, rec in zip(self.nodes, self.records):
            if rec is None:
                out.append(node.value)
                continue
            op, specs, params = rec
            vals = [out[s[1]] if s[0] == _NODE else s[1] for s in specs]
            out.append(_FORWARD[op](params, *vals))
        return out


def backward(tape: Tape, seed: Node) -> dict:
    """Reverse accumulation from a scalar seed.

    Returns a map node-index -> gradient for every node reached, and stores
    the gradient on each Node.  Gradients for leaves are what callers
    usually want.
    """
    if seed.tape is not tape:
        raise InvalidArgumentError("seed node is not on this tape")
    if np.shape(seed.value) != ():
        raise InvalidArgumentError("seed must be scalar-valued")
    grads: dict[int, np.ndarray] = {seed.idx: np.asarray(1.0)}
    for idx in range(seed.idx, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        rec = tape.records[idx]
        tape.nodes[idx].grad = g
        if rec is None:
            continue
        op, specs, params = rec
        vals = [tape.nodes[s[1]].value if s[0] == _NODE else s[1] for s in specs]
        in_grads = _VJP[op](params, tape.nodes[idx].value, g, *vals)
        for spec, gi in zip(specs, in_grads):
            if spec[0] != _NODE or gi is None:
                continue
            j = spec[1]
            if j in grads:
                grads[j] = grads[j] + gi
            else:
                grads[j] = gi
    return grads


def _unbroadcast(g, shape):
    """Sum g down to ``shape`` (reverse of numpy broadcasting)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _hat_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _hat_batch_vjp(g):
    out = np.zeros(g.shape[:-2] + (3,))
    out[..., 0] = g[..., 2, 1] - g[..., 1, 2]
    out[..., 1] = g[..., 0, 2] - g[..., 2, 0]
    out[..., 2] = g[..., 1, 0] - g[..., 0, 1]
    return out


def _huber_forward(params, x):
    delta, per_component = params
    if per_component:
        ax = np.abs(x)
        vals = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))
        return vals.sum(axis=-1)
    r = np.sqrt(np.sum(x * x, axis=-1))
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def _huber_vjp(params, out, g, x):
    delta, per_component = params
    if per_component:
        gx = np.where(np.abs(x) <= delta, x, delta * np.sign(x))
        return (g[..., None] * gx,)
    r = np.sqrt(np.sum(x * x, axis=-1))
    scale = np.where(r <= delta, 1.0, delta / np.where(r > 0, r, 1.0))
    return (g[..., None] * scale[..., None] * x,)


def _lie_log_forward(params, R, v, p):
    """Group logarithm of (R, v, p) batches -> (..., 9) tangent vectors.

    Non-finite inputs yield NaN outputs (instead of raising) so training
    loops can detect divergence at the loss value.
    """
    from .liegroup import ExtendedPose, se23_log

    Rb = np.asarray(R)
    single = Rb.ndim == 2
    Rb = Rb.reshape((-1, 3, 3))
    vb = np.asarray(v).reshape((-1, 3))
    pb = np.asarray(p).reshape((-1, 3))
    rows = []
    for i in range(Rb.shape[0]):
        if not np.all(np.isfinite(Rb[i])):
            rows.append(np.full(9, np.nan))
        else:
            rows.append(se23_log(ExtendedPose(Rb[i], vb[i], pb[i])))
    out = np.stack(rows)
    if single:
        return out[0]
    return out.reshape(np.shape(R)[:-2] + (9,))


def _lie_log_vjp(params, out, g, R, v, p):
    """Reverse rule via the inverse (transposed) left Jacobian.

    For on-manifold perturbations d(log) = J_l(xi)^-1 * prj(dX X^-1); the
    adjoint of that linear map gives the matrix-entry gradients.
    """
    Rb = np.asarray(R).reshape((-1, 3, 3))
    vb = np.asarray(v).reshape((-1, 3))
    pb = np.asarray(p).reshape((-1, 3))
    xib = np.asarray(out).reshape((-1, 9))
    gb = np.asarray(g).reshape((-1, 9))
    gR = np.zeros_like(Rb)
    gv = np.zeros_like(vb)
    gp = np.zeros_like(pb)
    for i in range(Rb.shape[0]):
        u = np.linalg.solve(se23_left_jacobian(xib[i]).T, gb[i])
        uR, uv, up = u[:3], u[3:6], u[6:9]
        gR[i] = 0.5 * _hat_batch(uR) @ Rb[i] - np.outer(uv, Rb[i].T @ vb[i]) - np.outer(
            up, Rb[i].T @ pb[i]
        )
        gv[i] = uv
        gp[i] = up
    return (
        gR.reshape(np.shape(R)),
        gv.reshape(np.shape(v)),
        gp.reshape(np.shape(p)),
    )


def _affine_forward(params, x, scale, shift):
    # channelwise scale/shift over (..., C, T)
    return x * scale[..., :, None] + shift[..., :, None]


def _affine_vjp(params, out, g, x, scale, shift):
    gx = g * scale[..., :, None]
    axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
    gscale = (g * x).sum(axis=axes)
    gshift = g.sum(axis=axes)
    return gx, gscale, gshift


def _matmul_vjp(params, out, g, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, np.shape(a)), _unbroadcast(gb, np.shape(b))


def _slice_vjp(params, out, g, x):
    gx = np.zeros_like(x)
    gx[params] = g
    return (gx,)


def _concat_forward(params, *parts):
    return np.concatenate(parts, axis=params)


def _concat_vjp(params, out, g, *parts):
    sizes = [np.shape(p)[params] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=params))


def _sum_forward(params, x):
    return x.sum(axis=params)


def _sum_vjp(params, out, g, x):
    if params is None:
        return (np.broadcast_to(g, np.shape(x)).copy(),)
    return (np.broadcast_to(np.expand_dims(g, params), np.shape(x)).copy(),)


_FORWARD = {
    "add": lambda p, a, b: a + b,
    "sub": lambda p, a, b: a - b,
    "mul": lambda p, a, b: a * b,
    "matmul": lambda p, a, b: a @ b,
    "transpose": lambda p, a: np.swapaxes(a, -1, -2),
    "reshape": lambda p, a: a.reshape(p),
    "concat": _concat_forward,
    "slice": lambda p, a: a[p],
    "where": lambda p, c, a, b: np.where(c, a, b),
    "sum": _sum_forward,
    "sin": lambda p, a: np.sin(a),
    "cos": lambda p, a: np.cos(a),
    "sqrt": lambda p, a: np.sqrt(a),
    "reciprocal": lambda p, a: 1.0 / a,
    "relu": lambda p, a: np.maximum(a, 0.0),
    "affine": _affine_forward,
    "hat": lambda p, a: _hat_batch(a),
    "huber": _huber_forward,
    "lie_log": _lie_log_forward,
}

_VJP = {
    "add": lambda p, o, g, a, b: (
        _unbroadcast(g, np.shape(a)),
        _unbroadcast(g, np.shape(b)),
    ),
    "sub": lambda p, o, g, a, b: (
        _unbroadcast(g, np.shape(a)),
        _unbroadcast(-g, np.shape(b)),
    ),
    "mul": lambda p, o, g, a, b: (
        _unbroadcast(g * b, np.shape(a)),
        _unbroadcast(g * a, np.shape(b)),
    ),
    "matmul": _matmul_vjp,
    "transpose": lambda p, o, g, a: (np.swapaxes(g, -1, -2),),
    "reshape": lambda p, o, g, a: (g.reshape(np.shape(a)),),
    "concat": _concat_vjp,
    "slice": _slice_vjp,
    "where": lambda p, o, g, c, a, b: (
        None,
        _unbroadcast(np.where(c, g, 0.0), np.shape(a)),
        _unbroadcast(np.where(c, 0.0, g), np.shape(b)),
    ),
    "sum": _sum_vjp,
    "sin": lambda p, o, g, a: (g * np.cos(a),),
    "cos": lambda p, o, g, a: (-g * np.sin(a),),
    "sqrt": lambda p, o, g, a: (g * 0.5 / o,),
    "reciprocal": lambda p, o, g, a: (-g * o * o,),
    "relu": lambda p, o, g, a: (np.where(a > 0, g, 0.0),),
    "affine": _affine_vjp,
    "hat": lambda p, o, g, a: (_hat_batch_vjp(g),),
    "huber": _huber_vjp,
    "lie_log": _lie_log_vjp,
}

PRIMITIVES = tuple(sorted(_FORWARD))


# -- thin functional wrappers -------------------------------------------------
# Each accepts Node or raw array operands; at least one operand must be a
# Node so a tape can be located.


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise InvalidArgumentError("at least one operand must be a tape node")


def add(a, b):
    return _tape_of(a, b).record("add", (a, b))


def sub(a, b):
    return _tape_of(a, b).record("sub", (a, b))


def mul(a, b):
    return _tape_of(a, b).record("mul", (a, b))


def matmul(a, b):
    for x in (a, b):
        v = x.value if isinstance(x, Node) else np.asarray(x)
        if np.ndim(v) < 2:
            raise InvalidArgumentError("matmul operands must be at least 2-D")
    return _tape_of(a, b).record("matmul", (a, b))


def transpose(a):
    return _tape_of(a).record("transpose", (a,))


def reshape(a, shape):
    return _tape_of(a).record("reshape", (a,), tuple(shape))


def concat(parts, axis=0):
    return _tape_of(*parts).record("concat", tuple(parts), axis)


def slice_(a, key):
    return _tape_of(a).record("slice", (a,), key)


def where(cond, a, b):
    # cond is a constant mask (not differentiable)
    return _tape_of(a, b).record("where", (np.asarray(cond), a, b))


def sum_(a, axis=None):
    return _tape_of(a).record("sum", (a,), axis)


def sin(a):
    return _tape_of(a).record("sin", (a,))


def cos(a):
    return _tape_of(a).record("cos", (a,))


def sqrt(a):
    return _tape_of(a).record("sqrt", (a,))


def reciprocal(a):
    return _tape_of(a).record("reciprocal", (a,))


def relu(a):
    return _tape_of(a).record("relu", (a,))


def affine(x, scale, shift):
    return _tape_of(x, scale, shift).record("affine", (x, scale, shift))


def hat_op(v):
    return _tape_of(v).record("hat", (v,))


def huber(x, delta=1.0, per_component=False):
    return _tape_of(x).record("huber", (x,), (float(delta), bool(per_component)))


def lie_log(R, v, p):
    return _tape_of(R, v, p).record("lie_log", (R, v, p))

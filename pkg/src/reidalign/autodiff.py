"""Minimal reverse-mode autodiff over dense float64 arrays.

The primitive set is closed and enumerated (see ``PRIMITIVES``): linear map,
2-d convolution, elementwise arithmetic, rectifier, axis reductions,
epsilon-stabilized L2 norm, the (e^x-1)/(e^x+1) squashing map, softmax,
fused softmax cross-entropy, row-wise KL divergence, reshape/transpose/
gather plumbing, and a gradient-blocking identity.  There is no graph
compiler: every op eagerly computes its value and records a backward
closure on a tape.

All values are float64 ``numpy`` arrays (scalars are 0-d arrays).  Every
forward op asserts its output is finite, so NaN/Inf surfaces at the op
that produced it instead of three modules later.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Added under the square root of every L2 norm so the distance stays
# differentiable at zero; fixes the norm floor at 1e-6.
NORM_EPS = 1e-12

# Row-distribution entries are floored at this value inside kl_rows.
PROB_FLOOR = 1e-12

# Largest double strictly below 1; tanh_half outputs are capped here so the
# squashed distance keeps its [0, 1) contract even where tanh rounds to 1.
ONE_BELOW = float(np.nextafter(1.0, 0.0))


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class Node:
    """One value on a tape: the output of a primitive or a leaf array."""

    __slots__ = ("tape", "nid", "value", "op", "parents", "_backward", "requires_grad")

    def __init__(self, tape, nid, value, op, parents, backward, requires_grad):
        self.tape = tape
        self.nid = nid
        self.value = value
        self.op = op
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.nid}, op={self.op!r}, shape={self.value.shape})"

    # Arithmetic sugar; plain numbers/arrays are lifted to constant leaves.
    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _lift(self.tape, other))

    def __rmul__(self, other):
        return mul(_lift(self.tape, other), self)

    def __neg__(self):
        return mul(self, _lift(self.tape, -1.0))


class Tape:
    """Append-only record of primitive applications, in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        """Enter an array onto the tape as a leaf.

        ``requires_grad=False`` marks inputs (images, detached partner
        outputs) whose gradients are never read, letting backward skip
        the work of producing them.
        """
        arr = _as_value(value)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(
                f"leaf{'' if name is None else ' ' + name}: non-finite input value"
            )
        name = "leaf" if name is None else f"leaf:{name}"
        node = Node(self, len(self.nodes), arr, name, (), None, requires_grad)
        self.nodes.append(node)
        return node

    def _record(self, op, value, parents, backward) -> Node:
        value = _as_value(value)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{op}: non-finite values in forward output")
        requires = any(p.requires_grad for p in parents)
        node = Node(self, len(self.nodes), value, op, tuple(parents), backward, requires)
        self.nodes.append(node)
        return node


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.leaf(x, name="const")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return a.tape._record("add", a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    def backward(g):
        return _unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape)

    return a.tape._record("sub", a.value - b.value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape._record("mul", av * bv, (a, b), backward)


def matmul(a: Node, b: Node) -> Node:
    """Linear map: contract the last axis of ``a`` with rows of 2-d ``b``."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul: cannot contract shapes {av.shape} and {bv.shape}")

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return a.tape._record("matmul", av @ bv, (a, b), backward)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return x.tape._record("relu", np.where(mask, x.value, 0.0), (x,), backward)


def square(x: Node) -> Node:
    xv = x.value

    def backward(g):
        return (g * 2.0 * xv,)

    return x.tape._record("square", xv * xv, (x,), backward)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def sum_(x: Node, axes=None) -> Node:
    axes = _norm_axes(axes, x.value.ndim)
    shape = x.value.shape

    def backward(g):
        g = np.expand_dims(g, axes) if g.ndim < len(shape) else g
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record("sum", x.value.sum(axis=axes), (x,), backward)


def mean(x: Node, axes=None) -> Node:
    axes = _norm_axes(axes, x.value.ndim)
    shape = x.value.shape
    count = float(np.prod([shape[a] for a in axes])) if axes else 1.0

    def backward(g):
        g = np.expand_dims(g, axes) if g.ndim < len(shape) else g
        return (np.broadcast_to(g, shape) / count,)

    return x.tape._record("mean", x.value.mean(axis=axes), (x,), backward)


def l2norm(x: Node, axis: int = -1) -> Node:
    """Epsilon-stabilized L2 norm along one axis: sqrt(sum(x^2) + NORM_EPS)."""
    axis = axis % x.value.ndim
    out = np.sqrt(np.sum(x.value * x.value, axis=axis) + NORM_EPS)
    xv = x.value

    def backward(g):
        return (np.expand_dims(g / out, axis) * xv,)

    return x.tape._record("l2norm", out, (x,), backward)


def tanh_half(x: Node) -> Node:
    """Elementwise (e^x - 1)/(e^x + 1) == tanh(x/2); maps [0, inf) to [0, 1)."""
    y = np.minimum(np.tanh(0.5 * x.value), ONE_BELOW)

    def backward(g):
        return (g * 0.5 * (1.0 - y * y),)

    return x.tape._record("tanh_half", y, (x,), backward)


def softmax(logits: Node) -> Node:
    """Row-wise softmax over the last axis."""
    z = logits.value - logits.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return logits.tape._record("softmax", y, (logits,), backward)


def softmax_xent(logits: Node, labels: np.ndarray) -> Node:
    """Mean softmax cross-entropy of 2-d ``logits`` against integer labels."""
    lv = logits.value
    if lv.ndim != 2:
        raise ValueError(f"softmax_xent: logits must be 2-d, got shape {lv.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    rows = lv.shape[0]
    if labels.shape != (rows,):
        raise ValueError(
            f"softmax_xent: labels shape {labels.shape} does not match {rows} rows"
        )
    z = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    loss = float(np.mean(lse - z[np.arange(rows), labels]))
    p = np.exp(z - lse[:, None])

    def backward(g):
        grad = p.copy()
        grad[np.arange(rows), labels] -= 1.0
        return (g * grad / rows,)

    return logits.tape._record("softmax_xent", loss, (logits,), backward)


def kl_rows(p: Node, q: Node) -> Node:
    """Mean over rows of KL(p_row || q_row), entries floored at PROB_FLOOR."""
    if p.value.shape != q.value.shape:
        raise ValueError(
            f"kl_rows: shape mismatch {p.value.shape} vs {q.value.shape}"
        )
    pf = np.maximum(p.value, PROB_FLOOR)
    qf = np.maximum(q.value, PROB_FLOOR)
    rows = p.value.reshape(-1, p.value.shape[-1]).shape[0]
    log_ratio = np.log(pf) - np.log(qf)
    value = float(np.sum(pf * log_ratio) / rows)
    p_active = p.value >= PROB_FLOOR
    q_active = q.value >= PROB_FLOOR

    def backward(g):
        gp = g * p_active * (log_ratio + 1.0) / rows
        gq = g * q_active * (-pf / qf) / rows
        return gp, gq

    return p.tape._record("kl_rows", value, (p, q), backward)


def reshape(x: Node, shape) -> Node:
    old = x.value.shape

    def backward(g):
        return (g.reshape(old),)

    return x.tape._record("reshape", x.value.reshape(shape), (x,), backward)


def transpose(x: Node, axes) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return x.tape._record("transpose", x.value.transpose(axes), (x,), backward)


def gather(x: Node, indices) -> Node:
    """Take elements of flattened ``x`` at integer ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    flat = x.value.reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= flat.size):
        raise ValueError(
            f"gather: index out of range for {flat.size} elements"
        )
    shape = x.value.shape

    def backward(g):
        grad = np.zeros(flat.size)
        np.add.at(grad, indices, g)
        return (grad.reshape(shape),)

    return x.tape._record("gather", flat[indices], (x,), backward)


def stop_gradient(x: Node) -> Node:
    """Identity on values; contributes exactly zero gradient to ``x``."""

    def backward(g):
        return (None,)

    node = x.tape._record("stop_gradient", x.value.copy(), (x,), backward)
    node.requires_grad = False  # nothing upstream of it ever needs flow
    return node


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    hp = (h + 2 * pad - kh) // stride + 1
    wp = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, hp, wp, kh, kw), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, c * kh * kw)
    return cols, hp, wp


def conv2d(x: Node, w: Node, stride: int = 1, pad: int = 1) -> Node:
    """2-d convolution of NCHW input with OIHW weights (im2col + matmul)."""
    xv, wv = x.value, w.value
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ValueError(
            f"conv2d: incompatible input {xv.shape} and weight {wv.shape}"
        )
    n, cin, h, width = xv.shape
    cout, _, kh, kw = wv.shape
    cols, hp, wp = _im2col(xv, kh, kw, stride, pad)
    out = (cols @ wv.reshape(cout, -1).T).reshape(n, hp, wp, cout)
    out = out.transpose(0, 3, 1, 2)

    need_gx, need_gw = x.requires_grad, w.requires_grad

    def backward(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gcols.T @ cols).reshape(wv.shape) if need_gw else None
        if not need_gx:
            return None, gw
        gcol = (gcols @ wv.reshape(cout, -1)).reshape(n, hp, wp, cin, kh, kw)
        gcol = gcol.transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros((n, cin, h + 2 * pad, width + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * hp : stride, j : j + stride * wp : stride] += gcol[
                    :, :, i, j
                ]
        return gx[:, :, pad : pad + h, pad : pad + width], gw

    return x.tape._record("conv2d", out, (x, w), backward)


# Dispatch table for the enumerated primitive set; used by the gradient
# sweep in the test suite and by callers that select ops by name.
PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "square": square,
    "sum": sum_,
    "mean": mean,
    "l2norm": l2norm,
    "tanh_half": tanh_half,
    "softmax": softmax,
    "softmax_xent": softmax_xent,
    "kl_rows": kl_rows,
    "reshape": reshape,
    "transpose": transpose,
    "gather": gather,
    "stop_gradient": stop_gradient,
}


def apply(kind: str, *inputs, **kwargs) -> Node:
    """Apply a primitive by name; rejects unknown kinds."""
    if kind not in PRIMITIVES:
        raise ValueError(f"apply: unknown primitive {kind!r}")
    return PRIMITIVES[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backprop(loss: Node) -> dict:
    """Gradients of scalar ``loss`` w.r.t. every contributing tape node.

    Returns a dict keyed by node id; use ``grads.get(node.nid)``.  Leaves
    wrapped by stop_gradient receive no flow from that edge.
    """
    if loss.value.shape != ():
        raise ValueError(
            f"backprop: loss must be scalar, got shape {loss.value.shape}"
        )
    grads: dict[int, np.ndarray] = {loss.nid: np.asarray(1.0)}
    for node in reversed(loss.tape.nodes):
        g = grads.get(node.nid)
        if g is None or node._backward is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent.nid)
            grads[parent.nid] = pg if acc is None else acc + pg
    return grads


def grad_wrt(grads: dict, node: Node) -> np.ndarray:
    """Gradient for ``node`` out of a backprop result; zeros if unreached."""
    g = grads.get(node.nid)
    return np.zeros_like(node.value) if g is None else np.asarray(g)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Adam moments and hyperparameters for a named parameter set."""

    rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One Adam update, in place, over a name -> array parameter dict."""
    if state.rate <= 0:
        raise ValueError(f"adam_step: rate must be positive, got {state.rate}")
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} does not match "
                f"parameter {name!r} of shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p -= state.rate * mhat / (np.sqrt(vhat) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    rel_err: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(
    builder,
    x0,
    h: float | None = None,
    tol: float = 1e-4,
    pin_stops: bool = False,
) -> GradCheckReport:
    """Compare backprop against central differences for ``builder``.

    ``builder(tape, x_node)`` must return a scalar Node.  When ``h`` is
    None the per-coordinate step is 1e-6 * (1 + |x_i|).  The error metric
    is |a - n| / max(1, |a|, |n|): absolute near zero, relative elsewhere.

    ``pin_stops`` holds every stop_gradient output at its base-point value
    during the difference quotients; required whenever the graph routes
    the checked leaf through stop_gradient, since those outputs are
    constants by definition.
    """
    if h is not None and h <= 0:
        raise ValueError(f"grad_check: step must be positive, got {h}")
    x0 = _as_value(x0)
    tape = Tape()
    xn = tape.leaf(x0, name="x")
    out = builder(tape, xn)
    analytic = grad_wrt(backprop(out), xn)
    pins = [n.value for n in tape.nodes if n.op == "stop_gradient"]

    def value_at(x):
        t = PinnedStopTape(pins) if pin_stops else Tape()
        return float(builder(t, t.leaf(x, name="x")).value)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        step = h if h is not None else 1e-6 * (1.0 + abs(flat[i]))
        orig = flat[i]
        xs = x0.copy().reshape(-1)
        xs[i] = orig + step
        fp = value_at(xs.reshape(x0.shape))
        xs[i] = orig - step
        fm = value_at(xs.reshape(x0.shape))
        nflat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    max_err = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_err < tol, max_err, rel, analytic, numeric)


class PinnedStopTape(Tape):
    """Tape that replays recorded stop_gradient outputs as fixed constants.

    stop_gradient "treats the variable as constant": differentiating any
    quantity a second time must hold those outputs at their original
    values.  Rebuilding a graph on this tape with perturbed leaves keeps
    every stop_gradient output pinned to the base run, which is exactly
    that semantics.  Requires the builder to record ops in a fixed order.
    """

    def __init__(self, pins):
        super().__init__()
        self._pins = list(pins)
        self._next_pin = 0

    def _record(self, op, value, parents, backward):
        if op == "stop_gradient":
            value = self._pins[self._next_pin]
            self._next_pin += 1
        return super()._record(op, value, parents, backward)


def mixed_second_derivative(builder, a0, b0, h: float = 1e-5) -> np.ndarray:
    """Numeric d/db_j of (d loss / d a_i) with stop_gradient outputs pinned.

    ``builder(tape, a_node, b_node)`` must return a scalar Node.  Returns
    the |a| x |b| matrix of mixed second derivatives in the zero-gradient
    semantics (stop_gradient outputs held at their base-point values).
    """
    a0 = _as_value(a0)
    b0 = _as_value(b0)
    base_tape = Tape()
    builder(base_tape, base_tape.leaf(a0), base_tape.leaf(b0))
    pins = [n.value for n in base_tape.nodes if n.op == "stop_gradient"]

    def grad_a(bv):
        tape = PinnedStopTape(pins)
        an = tape.leaf(a0)
        bn = tape.leaf(bv)
        grads = backprop(builder(tape, an, bn))
        return grad_wrt(grads, an).reshape(-1)

    mixed = np.zeros((a0.size, b0.size))
    flat = b0.reshape(-1)
    for j in range(flat.size):
        bp = flat.copy()
        bp[j] += h
        bm = flat.copy()
        bm[j] -= h
        mixed[:, j] = (grad_a(bp.reshape(b0.shape)) - grad_a(bm.reshape(b0.shape))) / (
            2.0 * h
        )
    return mixed


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_MAGIC = b"ARWT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    """Write a name -> array dict in the ARWT binary layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Read a parameter dict written by ``save_checkpoint``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)
        return params

"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a :class:`Node`.  Leaves created with :func:`param` collect
gradients in ``.grad``; :func:`constant` leaves never do.  A node whose
``gate_open`` flag is False forwards its value unchanged but passes no
gradient to its parents, which is how a shared sub-network is used by one
loss term without being trained by it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "kind", "is_param", "gate_open")

    def __init__(self, value, parents=(), backward_fn=None, kind="leaf", is_param=False):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.kind = kind
        self.is_param = is_param
        self.gate_open = True
        # Parameters own a persistent accumulator; other nodes fill theirs lazily in backward().
        self.grad = np.zeros_like(value) if is_param else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.kind}, shape={self.value.shape})"

    # Operator sugar; all of these route through the functions below.
    def __add__(self, other):
        return add(self, _as_node(other))

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, _as_node(other))

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_node(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(value, what):
    # One reduction instead of an elementwise mask; any NaN/Inf poisons the sum.
    if not np.isfinite(np.sum(value)) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values in {what}")


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def param(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    _check_finite(arr, "parameter")
    return Node(arr, kind="param", is_param=True)


def constant(value) -> Node:
    arr = _as_array(value)
    _check_finite(arr, "constant")
    return Node(arr, kind="const")


def _make(value, parents, backward_fn, kind):
    _check_finite(value, f"output of {kind}")
    return Node(value, parents, backward_fn, kind)


def stop_gradient(x: Node) -> Node:
    """Identity in the forward pass, closed gate in the backward pass."""
    out = _make(x.value, (x,), lambda g: (g,), "gate")
    out.gate_open = False
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: operand 'b' has shape {b.shape}, expected a shape broadcastable "
            f"against operand 'a' {a.shape}"
        ) from None


# -- elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def neg(a: Node) -> Node:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Node) -> Node:
    on = a.value > 0
    return _make(np.where(on, a.value, 0.0), (a,), lambda g: (g * on,), "relu")


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):  # overflow is reported by _make as NonFiniteError
        y = np.exp(a.value)
    return _make(y, (a,), lambda g: (g * y,), "exp")


# -- linear algebra / shape ------------------------------------------------------

def matmul(a: Node, w: Node) -> Node:
    """``a`` of shape (..., k) times a 2-D ``w`` of shape (k, m)."""
    if w.value.ndim != 2:
        raise ShapeError(f"matmul: operand 'w' must be 2-D, got shape {w.shape}")
    if a.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"matmul: operand 'a' has shape {a.shape}, expected last axis {w.shape[0]}"
        )
    av, wv = a.value, w.value

    def backward(g):
        ga = g @ wv.T
        gw = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _make(av @ wv, (a, w), backward, "matmul")


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: operand 'a' of shape {old} cannot become {shape}") from None
    return _make(value, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(nodes: Sequence[Node]) -> Node:
    """Concatenate on the last axis."""
    lead = nodes[0].shape[:-1]
    for i, n in enumerate(nodes):
        if n.shape[:-1] != lead:
            raise ShapeError(f"concat: operand {i} has shape {n.shape}, expected leading {lead}")
    sizes = np.cumsum([n.shape[-1] for n in nodes])[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=-1), tuple(nodes),
                 lambda g: tuple(np.split(g, sizes, axis=-1)), "concat")


def take(a: Node, index, axis: int = 0) -> Node:
    """Gather slices of ``a`` along ``axis`` (rows by default)."""
    index = np.asarray(index, dtype=np.int64)
    axis = axis % a.value.ndim
    n = a.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"take: index out of range for axis {axis} of size {n}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.value, index, axis=axis), (a,), backward, "take")


def pick(a: Node, index) -> Node:
    """Select ``a[..., index[...]]`` on the last axis, one entry per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"pick: index has shape {index.shape}, expected {a.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError(f"pick: index out of range for last axis of size {a.shape[-1]}")
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    value = np.take_along_axis(a.value, index[..., None], axis=-1)[..., 0]
    return _make(value, (a,), backward, "pick")


# -- reductions --------------------------------------------------------------------

def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    axis = axis % a.value.ndim
    return _make(a.value.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum")


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a: Node) -> Node:
    """Overflow-safe log-sum-exp over the last axis."""
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    soft = e / s
    return _make(out, (a,), lambda g: (g[..., None] * soft,), "logsumexp")


def log_softmax(a: Node) -> Node:
    x = a.value
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(y)
    return _make(y, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


# -- fused recurrent layer -----------------------------------------------------------

def lstm_forward(xw, w_hh):
    """Run an LSTM given precomputed input projections ``xw`` (B, T, 4H).

    Gate order is input, forget, output, cell.  Returns hidden states
    (B, T, H) and the per-step cache needed for backprop through time.
    """
    B, T, H4 = xw.shape
    H = H4 // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.empty((B, T, H))
    cache = []
    for t in range(T):
        z = xw[:, t] + h @ w_hh
        s = _sigmoid(z[:, :3 * H])
        g = np.tanh(z[:, 3 * H:])
        c_prev = c
        c = s[:, H:2 * H] * c_prev + s[:, :H] * g
        tc = np.tanh(c)
        h_prev = h
        h = s[:, 2 * H:] * tc
        hs[:, t] = h
        cache.append((s, g, c_prev, tc, h_prev))
    return hs, cache


def lstm_step(x_proj, h, c, w_hh):
    """Single LSTM step on numpy arrays; used by incremental decoding."""
    H = h.shape[-1]
    z = x_proj + h @ w_hh
    s = _sigmoid(z[..., :3 * H])
    c = s[..., H:2 * H] * c + s[..., :H] * np.tanh(z[..., 3 * H:])
    return s[..., 2 * H:] * np.tanh(c), c


def lstm(x: Node, w_ih: Node, w_hh: Node, b: Node) -> Node:
    """Unidirectional LSTM over (B, T, D) inputs, zero initial state."""
    if x.value.ndim != 3:
        raise ShapeError(f"lstm: operand 'x' must be (B, T, D), got {x.shape}")
    D = x.shape[-1]
    H = w_hh.shape[0]
    if w_ih.shape != (D, 4 * H):
        raise ShapeError(f"lstm: operand 'w_ih' has shape {w_ih.shape}, expected {(D, 4 * H)}")
    if w_hh.shape != (H, 4 * H):
        raise ShapeError(f"lstm: operand 'w_hh' has shape {w_hh.shape}, expected {(H, 4 * H)}")
    if b.shape != (4 * H,):
        raise ShapeError(f"lstm: operand 'b' has shape {b.shape}, expected {(4 * H,)}")
    xv, wih, whh = x.value, w_ih.value, w_hh.value
    hs, cache = lstm_forward(xv @ wih + b.value, whh)

    def backward(gh):
        B, T, _ = gh.shape
        dz_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dwhh = np.zeros_like(whh)
        for t in range(T - 1, -1, -1):
            sg, g, c_prev, tc, h_prev = cache[t]
            i, f, o = sg[:, :H], sg[:, H:2 * H], sg[:, 2 * H:]
            dh = gh[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :H] = dc * g
            dz[:, H:2 * H] = dc * c_prev
            dz[:, 2 * H:3 * H] = dh * tc
            dz[:, :3 * H] *= sg * (1.0 - sg)
            dz[:, 3 * H:] = dc * i * (1.0 - g * g)
            dwhh += h_prev.T @ dz
            dh_next = dz @ whh.T
            dc_next = dc * f
        dx = dz_all @ wih.T
        flat = dz_all.reshape(-1, 4 * H)
        dwih = xv.reshape(-1, D).T @ flat
        db = flat.sum(axis=0)
        return dx, dwih, dwhh, db

    return _make(hs, (x, w_ih, w_hh, b), backward, "lstm")


def custom(value, parents: Sequence[Node], backward_fn: Callable, kind: str) -> Node:
    """Wrap an externally computed value with a hand-written vector-Jacobian product."""
    return _make(np.asarray(value, dtype=np.float64), parents, backward_fn, kind)


# -- backward --------------------------------------------------------------------------

def _topo_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.gate_open:
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(param) into every reachable parameter's ``.grad``.

    Intermediate gradients are reset on each call; parameter accumulators are
    not, so repeated calls add up.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        if not node.is_param:
            node.grad = None
    seed = np.ones_like(root.value)
    root.grad = seed if root.grad is None else root.grad + seed
    for node in reversed(order):
        if node.backward_fn is None or not node.gate_open or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if p.backward_fn is None and not p.is_param:
                continue
            p.grad = g if p.grad is None else p.grad + g


# -- finite-difference verification ---------------------------------------------------------

def finite_diff_check(
    f: Callable[[Mapping[str, Mapping[str, Node]]], Node],
    params: Mapping[str, Mapping[str, np.ndarray]],
    step: float = 1e-5,
    tol: float = 1e-6,
    samples_per_array: int = 4,
    seed: int = 0,
    partitions: Iterable[str] | None = None,
    floor: float = 1e-8,
) -> dict:
    """Compare reverse-mode gradients with central differences.

    ``f`` receives ``{partition: {name: Node}}`` and returns a scalar node;
    ``params`` holds the base arrays in the same layout.  Up to
    ``samples_per_array`` coordinates are drawn from every array.  The
    relative error divides by ``max(|analytic|, |numeric|, floor)``; raise
    ``floor`` when the differences' roundoff (about eps * |f| / step) is
    comparable to the smallest gradients.  Returns
    ``{"max_rel_error": {partition: err}, "max_abs_error", "worst", "passed"}``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    partitions = list(params) if partitions is None else list(partitions)

    def leaves_from(arrays, make):
        return {p: {k: make(v) for k, v in group.items()} for p, group in arrays.items()}

    def evaluate(arrays):
        return float(f(leaves_from(arrays, constant)).value)

    base = {p: {k: np.array(v, dtype=np.float64) for k, v in g.items()} for p, g in params.items()}
    f0 = evaluate(base)
    if evaluate(base) != f0:
        raise RuntimeError("finite_diff_check: f is not deterministic")

    leaves = leaves_from(base, param)
    backward(f(leaves))

    rng = np.random.default_rng(seed)
    report: dict = {"max_rel_error": {}, "max_abs_error": 0.0, "worst": None}
    worst = -1.0
    for part in partitions:
        part_err = 0.0
        for name, arr in base[part].items():
            analytic_all = leaves[part][name].grad
            n = arr.size
            picks = rng.choice(n, size=min(samples_per_array, n), replace=False)
            for flat_idx in picks:
                idx = np.unravel_index(flat_idx, arr.shape)
                orig = arr[idx]
                arr[idx] = orig + step
                fp = evaluate(base)
                arr[idx] = orig - step
                fm = evaluate(base)
                arr[idx] = orig
                numeric = (fp - fm) / (2.0 * step)
                analytic = float(analytic_all[idx])
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                report["max_abs_error"] = max(report["max_abs_error"], abs(analytic - numeric))
                part_err = max(part_err, err)
                if err > worst:
                    worst = err
                    report["worst"] = {"partition": part, "name": name, "index": tuple(int(i) for i in idx),
                                       "analytic": analytic, "numeric": numeric, "rel_error": err}
        report["max_rel_error"][part] = part_err
    report["passed"] = max(report["max_rel_error"].values(), default=0.0) <= tol
    report["tol"] = tol
    report["floor"] = floor
    return report

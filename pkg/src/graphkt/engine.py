"""Reverse-mode differentiation tape over numpy arrays.

This is deliberately not a general autodiff system: it covers exactly the
operations the tracing model is built from (dense matmuls, elementwise
nonlinearities, row gather/scatter, reductions) on a recorded tape, plus
parameter storage, Adam updates and a finite-difference gradient checker.

Gradients accumulate without in-place mutation, so the reduction order is
fixed by tape construction order and two runs with identical inputs produce
bitwise-identical gradients.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_GRAD_ENABLED = True
_SMOOTH_LOG: "SmoothnessLog | None" = None
_TAPE: "list[Node] | None" = None

EXP_CLAMP_LO = -60.0
EXP_CLAMP_HI = 0.0


class SmoothnessLog:
    """Accumulates a digest of every discrete decision taken in a forward pass.

    ReLU sign masks, clamp masks and model-level gate decisions all feed the
    digest. Two passes with the same digest took identical branches, so the
    loss is smooth between them and central differences are trustworthy.
    """

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def update(self, payload: bytes) -> None:
        self._h.update(payload)

    def update_mask(self, mask: np.ndarray) -> None:
        self._h.update(np.packbits(mask.ravel()).tobytes())

    def digest(self) -> bytes:
        return self._h.digest()


@contextmanager
def collect_smoothness():
    """Context manager that records branch decisions into a SmoothnessLog."""
    global _SMOOTH_LOG
    prev = _SMOOTH_LOG
    log = SmoothnessLog()
    _SMOOTH_LOG = log
    try:
        yield log
    finally:
        _SMOOTH_LOG = prev


def log_gate(payload: bytes) -> None:
    """Record a model-level discrete decision (e.g. an argmax gate)."""
    if _SMOOTH_LOG is not None:
        _SMOOTH_LOG.update(payload)


def _log_mask(mask: np.ndarray) -> None:
    if _SMOOTH_LOG is not None:
        _SMOOTH_LOG.update_mask(mask)


@contextmanager
def no_grad():
    """Disable tape recording; ops return value-only nodes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One tape entry: a value plus vjp edges back to its inputs."""

    __slots__ = ("value", "grad", "edges", "requires_grad")

    def __init__(self, value, edges=(), requires_grad=False):
        self.value = value
        self.grad = None
        self.edges = edges
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape


def as_node(x, dtype=None) -> Node:
    """Wrap a constant array or scalar as a non-differentiable node."""
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=dtype))


def start_tape() -> None:
    """Begin a fresh linear recording of grad-requiring nodes.

    Node creation order is a valid topological order (an op's inputs always
    exist before it), so `backward` can sweep the recording in reverse
    without a graph search. Each recording covers one bind/forward/backward
    round.
    """
    global _TAPE
    _TAPE = []


def stop_tape() -> None:
    global _TAPE
    _TAPE = None


def _make(value: np.ndarray, edges) -> Node:
    if not _GRAD_ENABLED:
        return Node(value)
    if len(edges) == 1:
        if not edges[0][0].requires_grad:
            return Node(value)
        live = edges
    else:
        live = [e for e in edges if e[0].requires_grad]
        if not live:
            return Node(value)
    node = Node(value, live, True)
    if _TAPE is not None:
        _TAPE.append(node)
    return node


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

# python-number operands stay raw scalars: numpy's weak promotion then keeps
# float32 graphs in float32, and the constant side needs no vjp edge


def add(a, b) -> Node:
    if isinstance(b, (int, float)):
        a = as_node(a)
        return _make(a.value + b, ((a, lambda g: g),))
    if isinstance(a, (int, float)):
        b = as_node(b)
        return _make(a + b.value, ((b, lambda g: g),))
    a, b = as_node(a), as_node(b)
    val = a.value + b.value
    return _make(val, (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ))


def sub(a, b) -> Node:
    if isinstance(b, (int, float)):
        a = as_node(a)
        return _make(a.value - b, ((a, lambda g: g),))
    if isinstance(a, (int, float)):
        b = as_node(b)
        return _make(a - b.value, ((b, lambda g: -g),))
    a, b = as_node(a), as_node(b)
    val = a.value - b.value
    return _make(val, (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ))


def mul(a, b) -> Node:
    if isinstance(b, (int, float)):
        a = as_node(a)
        return _make(a.value * b, ((a, lambda g: g * b),))
    if isinstance(a, (int, float)):
        b = as_node(b)
        return _make(a * b.value, ((b, lambda g: g * a),))
    a, b = as_node(a), as_node(b)
    val = a.value * b.value
    return _make(val, (
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, ((a, lambda g: -g),))


def scale(a, c: float) -> Node:
    a = as_node(a)
    return _make(a.value * c, ((a, lambda g: g * c),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    val = a.value @ b.value
    return _make(val, (
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ))


def transpose(a) -> Node:
    a = as_node(a)
    return _make(a.value.T.copy(), ((a, lambda g: g.T),))


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, ((a, lambda g: g * out * (1.0 - out)),))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    _log_mask(mask)
    return _make(a.value * mask, ((a, lambda g: g * mask),))


def softplus(a) -> Node:
    a = as_node(a)
    out = np.logaddexp(0.0, a.value)
    x = a.value
    return _make(out, ((a, lambda g: g / (1.0 + np.exp(-x))),))


def clamped_exp(a, lo: float = EXP_CLAMP_LO, hi: float = EXP_CLAMP_HI) -> Node:
    """exp(clip(x, lo, hi)); keeps huge negative kernel exponents finite."""
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    _log_mask(inside)
    out = np.exp(np.clip(a.value, lo, hi))
    return _make(out, ((a, lambda g: g * out * inside),))


def log(a) -> Node:
    a = as_node(a)
    x = a.value
    return _make(np.log(x), ((a, lambda g: g / x),))


def clip(a, lo: float, hi: float) -> Node:
    a = as_node(a)
    inside = (a.value >= lo) & (a.value <= hi)
    _log_mask(inside)
    return _make(np.clip(a.value, lo, hi), ((a, lambda g: g * inside),))


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, ((a, vjp),))


# ---------------------------------------------------------------------------
# shape ops


def concat(parts, axis: int = 1) -> Node:
    parts = [as_node(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    edges = []
    start = 0
    for p in parts:
        n = p.value.shape[axis]
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(start, start + n)
        sl = tuple(sl)
        edges.append((p, lambda g, sl=sl: g[sl]))
        start += n
    return _make(val, tuple(edges))


def gather_rows(a, idx) -> Node:
    """Select rows `idx` of a 2-D node (embedding/memory lookup)."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.int64)
    val = a.value[idx]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _make(val, ((a, vjp),))


def gather_submatrix(a, ix) -> Node:
    """Select a row/column block of a 2-D node; `ix` comes from np.ix_."""
    a = as_node(a)
    val = a.value[ix]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, ix, g)
        return out

    return _make(val, ((a, vjp),))


def scatter_rows(rows, idx, n_rows: int) -> Node:
    """Place stacked rows at positions `idx` of an otherwise-zero matrix."""
    rows = as_node(rows)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size > 1:
        srt = np.sort(idx)
        if (srt[1:] == srt[:-1]).any():
            raise ValueError("scatter_rows requires unique row indices")
    val = np.zeros((n_rows, rows.value.shape[1]), dtype=rows.value.dtype)
    val[idx] = rows.value
    return _make(val, ((rows, lambda g: g[idx]),))


def sum_all(a) -> Node:
    a = as_node(a)
    val = np.asarray(a.value.sum())
    return _make(val, ((a, lambda g: np.full_like(a.value, float(g))),))


def add_n(nodes) -> Node:
    """Sum a list of same-shaped nodes in one tape entry."""
    nodes = [as_node(n) for n in nodes]
    val = nodes[0].value.copy()
    for n in nodes[1:]:
        val += n.value
    return _make(val, [(n, lambda g: g) for n in nodes])


def tile_rows(a, n: int) -> Node:
    """Repeat a single-row node n times."""
    a = as_node(a)
    if a.value.shape[0] != 1:
        raise ValueError("tile_rows expects a single-row input")
    val = np.broadcast_to(a.value, (n, a.value.shape[1])).copy()
    return _make(val, ((a, lambda g: g.sum(axis=0, keepdims=True)),))


def sum_axis(a, axis: int, keepdims: bool = True) -> Node:
    a = as_node(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _make(val, ((a, vjp),))


def slice_cols(a, start: int, stop: int) -> Node:
    a = as_node(a)
    val = a.value[:, start:stop].copy()

    def vjp(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return out

    return _make(val, ((a, vjp),))


# ---------------------------------------------------------------------------
# constrained parameterizations


def constrain_nonneg_vector(raw):
    """Softmax a raw vector into strictly positive weights summing to 1."""
    if isinstance(raw, Node):
        return softmax(raw, axis=-1)
    raw = np.asarray(raw, dtype=np.float64)
    return softmax(Node(raw), axis=-1).value


def constrain_nonneg_matrix(raw):
    """Softmax each column of a raw square matrix along the input dimension.

    Every entry is strictly positive and each column sums to 1, so the matrix
    acts as a non-negative mixing map on memory vectors.
    """
    if isinstance(raw, Node):
        return softmax(raw, axis=0)
    raw = np.asarray(raw, dtype=np.float64)
    return softmax(Node(raw), axis=0).value


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Node) -> None:
    """Reverse sweep from a scalar node, populating `.grad` on the tape.

    Uses the active linear recording when one exists, otherwise falls back
    to a depth-first topological sort. Accumulation allocates fresh arrays
    (never `+=` in place), which makes shared upstream gradients safe and
    keeps the reduction order fixed.
    """
    if root.value.size != 1:
        raise ValueError("backward requires a scalar loss node")
    if not root.requires_grad:
        raise RuntimeError("loss does not depend on any trainable parameter")

    if _TAPE is not None and _TAPE and _TAPE[-1] is root:
        # the recording ends at the loss node: creation order is topological
        topo = _TAPE
    else:
        topo = []
        visited: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node.edges:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in node.edges:
            contrib = vjp(g)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


# ---------------------------------------------------------------------------
# parameter storage


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParameterStore:
    """Named trainable arrays with paired gradient and Adam moment slots."""

    FORMAT = "graphkt-checkpoint"
    VERSION = 1

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}
        self.step_count = 0
        self._bound: dict[str, Node] | None = None

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._params[name] = Param(
            value=arr,
            grad=np.zeros_like(arr),
            m=np.zeros_like(arr),
            v=np.zeros_like(arr),
        )

    def names(self):
        return list(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def bind(self) -> dict[str, Node]:
        """Create leaf nodes and start a fresh tape recording."""
        start_tape()
        self._bound = {
            name: Node(p.value, (), requires_grad=True)
            for name, p in self._params.items()
        }
        return self._bound

    def backward(self, loss: Node) -> None:
        """Run the reverse sweep and accumulate into the gradient slots."""
        if self._bound is None:
            raise RuntimeError("backward called without a bound forward pass")
        backward(loss)
        for name, node in self._bound.items():
            if node.grad is not None:
                self._params[name].grad += node.grad
        self._bound = None
        stop_tape()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def adam_step(self, lr: float, l2: float = 0.0,
                  beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """Adam with bias correction; weight decay joins the gradient first."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for p in self._params.values():
            g = p.grad if l2 == 0.0 else p.grad + l2 * p.value
            p.m[...] = beta1 * p.m + (1.0 - beta1) * g
            p.v[...] = beta2 * p.v + (1.0 - beta2) * g * g
            p.value -= lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + eps)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, arr in snap.items():
            self._params[name].value[...] = arr

    # -- checkpoint io ------------------------------------------------------

    def save(self, path, hyper: dict, seed: int) -> None:
        arrays = []
        for name, p in self._params.items():
            arrays.append({
                "name": name,
                "shape": list(p.value.shape),
                "hex": [float(x).hex() for x in p.value.ravel()],
            })
        doc = {
            "format": self.FORMAT,
            "version": self.VERSION,
            "dtype": self.dtype.name,
            "hyper": hyper,
            "seed": seed,
            "step_count": self.step_count,
            "arrays": arrays,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", dict, int]:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("format") != cls.FORMAT:
            raise ValueError(f"not a {cls.FORMAT} file: {path}")
        if doc.get("version") != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        store = cls(dtype=np.dtype(doc["dtype"]))
        for entry in doc["arrays"]:
            flat = np.array([float.fromhex(h) for h in entry["hex"]],
                            dtype=store.dtype)
            store.add(entry["name"], flat.reshape(entry["shape"]))
        store.step_count = doc.get("step_count", 0)
        return store, doc["hyper"], doc["seed"]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    tolerance: float
    n_checked: int
    n_skipped: int
    max_rel_err: float
    group_errors: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"gradient check: {'PASS' if self.passed else 'FAIL'} "
            f"(checked={self.n_checked}, skipped={self.n_skipped}, "
            f"max_rel_err={self.max_rel_err:.3e}, tol={self.tolerance:.1e})"
        ]
        for name in sorted(self.group_errors):
            lines.append(f"  {name}: {self.group_errors[name]:.3e}")
        return "\n".join(lines)


def grad_check(store: ParameterStore, build_loss, rng,
               n_coords: int = 200, h: float = 1e-5,
               tolerance: float = 1e-4, atol: float = 1e-8,
               max_attempts: int | None = None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `build_loss(bound)` must rebuild the loss node from bound parameters.
    Coordinates whose perturbed passes take different discrete branches
    (argmax gates, ReLU/clamp masks) are locally non-smooth and are skipped;
    sampling continues until `n_coords` smooth coordinates were checked.
    """
    store.zero_grad()
    bound = store.bind()
    loss = build_loss(bound)
    store.backward(loss)
    analytic = {name: store[name].grad.copy() for name in store.names()}

    names = store.names()
    sizes = np.array([store.value(n).size for n in names])
    total = int(sizes.sum())
    cum = np.cumsum(sizes)

    def eval_loss() -> tuple[float, bytes]:
        with no_grad(), collect_smoothness() as branch_log:
            val = build_loss(store.bind()).value.item()
            store._bound = None
            return val, branch_log.digest()

    report = GradCheckReport(tolerance=tolerance, n_checked=0, n_skipped=0,
                             max_rel_err=0.0)
    attempts = 0
    limit = max_attempts if max_attempts is not None else n_coords * 4
    while report.n_checked < n_coords and attempts < limit:
        attempts += 1
        flat = int(rng.integers(total))
        pidx = int(np.searchsorted(cum, flat, side="right"))
        name = names[pidx]
        local = flat - (cum[pidx] - sizes[pidx])
        value = store.value(name)
        orig = value.flat[local]

        value.flat[local] = orig + h
        lp, sig_p = eval_loss()
        value.flat[local] = orig - h
        lm, sig_m = eval_loss()
        value.flat[local] = orig

        if sig_p != sig_m:
            report.n_skipped += 1
            continue

        numeric = (lp - lm) / (2.0 * h)
        exact = analytic[name].flat[local]
        diff = abs(exact - numeric)
        denom = max(abs(exact), abs(numeric))
        rel = 0.0 if diff <= atol else diff / max(denom, atol)
        report.n_checked += 1
        report.max_rel_err = max(report.max_rel_err, rel)
        report.group_errors[name] = max(report.group_errors.get(name, 0.0), rel)
        if rel >= tolerance:
            report.failures.append((name, int(local), rel))

    stop_tape()
    return report

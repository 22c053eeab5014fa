"""Dense tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays. A :class:`Graph` records every operation in
execution order, so node ids are already a topological order and the
backward sweep is a single reverse pass over the tape. Parameters enter a
graph by name, which is what makes the forward pass functional: the same
network code runs against base weights or against an adapted copy.

Only what a small U-Net with a pixelwise cross-entropy needs is provided:
stride-1 "same" convolution, relu, 2x2 max pooling, nearest-neighbour 2x
upsampling, channel concatenation, softmax cross-entropy and a handful of
elementwise helpers.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, LabelRangeError, NumericError, ShapeError

PRECISION_ENV = "METASEG_PRECISION"
_DTYPES = {"f32": np.float32, "f64": np.float64}

GradMap = dict[str, np.ndarray]
Vjp = Callable[[np.ndarray, tuple[bool, ...]], tuple["np.ndarray | None", ...]]


def default_dtype() -> type[np.floating]:
    """Floating type selected by ``METASEG_PRECISION`` (``f32`` unless set)."""
    key = os.environ.get(PRECISION_ENV, "f32").strip().lower()
    if key not in _DTYPES:
        raise ConfigError(f"{PRECISION_ENV} must be one of {sorted(_DTYPES)}, got {key!r}")
    return _DTYPES[key]


def resolve_dtype(precision: str | None) -> type[np.floating]:
    if precision is None:
        return default_dtype()
    if precision not in _DTYPES:
        raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {precision!r}")
    return _DTYPES[precision]


def precision_name(dtype) -> str:
    return "f64" if np.dtype(dtype) == np.float64 else "f32"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Vjp | None
    requires_grad: bool
    name: str | None = None


class Var:
    """Handle to one node of a graph."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        node = self.graph.nodes[self.id]
        return f"Var(id={self.id}, kind={node.kind}, shape={self.shape})"


class Graph:
    """Append-only operation tape."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}

    def param(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        var = self._push(Node("param", (), np.asarray(value), None, requires_grad, name))
        self.params[name] = var.id
        return var

    def const(self, value) -> Var:
        return self._push(Node("const", (), np.asarray(value), None, False))

    def record(self, kind: str, inputs: Sequence[Var], value: np.ndarray, vjp: Vjp) -> Var:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{kind} produced non-finite values")
        ids = tuple(v.id for v in inputs)
        requires = any(self.nodes[i].requires_grad for i in ids)
        return self._push(Node(kind, ids, value, vjp if requires else None, requires))

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)


def _graph_of(*args) -> Graph:
    for a in args:
        if isinstance(a, Var):
            return a.graph
    raise ContractError("at least one operand must be a graph variable")


def _lift(graph: Graph, x) -> Var:
    if isinstance(x, Var):
        if x.graph is not graph:
            raise ContractError("operands belong to different graphs")
        return x
    return graph.const(x)


def conv2d(x, weight, bias) -> Var:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is ``[B, Cin, H, W]``, ``weight`` ``[Cout, Cin, kh, kw]`` with odd
    kernel sides, ``bias`` ``[Cout]``.
    """
    g = _graph_of(x, weight, bias)
    x, weight, bias = _lift(g, x), _lift(g, weight), _lift(g, bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 4 or wv.ndim != 4 or bv.ndim != 1:
        raise ShapeError(
            f"conv2d expects 4-D input/weight and 1-D bias, got input{xv.shape} "
            f"weight{wv.shape} bias{bv.shape}"
        )
    n, cin, h, w = xv.shape
    cout, wcin, kh, kw = wv.shape
    if wcin != cin:
        raise ShapeError(f"conv2d input channels {cin} != weight input channels {wcin}")
    if bv.shape[0] != cout:
        raise ShapeError(f"conv2d bias length {bv.shape[0]} != output channels {cout}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must have odd sides, got {kh}x{kw}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    # cols is [Cin*kh*kw, B*H*W]; each (i, j) slab is a shifted view of the
    # padded input so the copy runs along contiguous rows.
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xv.transpose(1, 0, 2, 3)).reshape(cin, n * h * w)
    else:
        xp = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=xv.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = xv.transpose(1, 0, 2, 3)
        cols = np.empty((cin, kh, kw, n, h, w), dtype=xv.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
        cols = cols.reshape(cin * kh * kw, n * h * w)
    w2 = wv.reshape(cout, -1)
    out = w2 @ cols
    out += bv[:, None]
    value = out.reshape(cout, n, h, w).transpose(1, 0, 2, 3)

    def vjp(grad, needs):
        g2 = grad.transpose(1, 0, 2, 3).reshape(cout, n * h * w)
        dx = dw = db = None
        if needs[0]:
            dcols = (w2.T @ g2).reshape(cin, kh, kw, n, h, w)
            if kh == 1 and kw == 1:
                dx = dcols[:, 0, 0].transpose(1, 0, 2, 3)
            else:
                dxp = np.zeros((cin, n, h + 2 * ph, w + 2 * pw), dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
                dx = dxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3)
        if needs[1]:
            dw = (g2 @ cols.T).reshape(wv.shape)
        if needs[2]:
            db = g2.sum(axis=1)
        return dx, dw, db

    return g.record("conv2d", (x, weight, bias), value, vjp)


def relu(x: Var) -> Var:
    mask = x.value > 0
    value = np.where(mask, x.value, 0).astype(x.value.dtype, copy=False)
    return x.graph.record("relu", (x,), value, lambda grad, needs: (grad * mask,))


def maxpool2(x: Var) -> Var:
    """2x2 max pooling, stride 2. Ties go to the first element in row-major order."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"maxpool2 expects a 4-D input, got shape {xv.shape}")
    n, c, h, w = xv.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got H={h} W={w}")
    windows = xv.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    arg = windows.argmax(axis=-1)[..., None]
    value = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def vjp(grad, needs):
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(gw, arg, grad[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return x.graph.record("maxpool2", (x,), value, vjp)


def upsample2(x: Var) -> Var:
    """Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"upsample2 expects a 4-D input, got shape {xv.shape}")
    n, c, h, w = xv.shape
    value = np.broadcast_to(xv[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def vjp(grad, needs):
        return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return x.graph.record("upsample2", (x,), value, vjp)


def concat_channels(a: Var, b: Var) -> Var:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    av, bv = a.value, b.value
    if av.ndim != 4 or bv.ndim != 4:
        raise ShapeError(f"concat_channels expects 4-D inputs, got {av.shape} and {bv.shape}")
    if (av.shape[0], av.shape[2], av.shape[3]) != (bv.shape[0], bv.shape[2], bv.shape[3]):
        raise ShapeError(
            f"concat_channels needs matching B,H,W: {av.shape} vs {bv.shape}"
        )
    c1 = av.shape[1]
    value = np.concatenate([av, bv], axis=1)
    return g.record("concat", (a, b), value, lambda grad, needs: (grad[:, :c1], grad[:, c1:]))


def softmax_ce(logits: Var, target: np.ndarray) -> Var:
    """Mean pixelwise cross-entropy of ``[B, K, H, W]`` logits against ``[B, H, W]`` class ids."""
    lv = logits.value
    target = np.asarray(target)
    if lv.ndim != 4:
        raise ShapeError(f"softmax_ce expects [B,K,H,W] logits, got {lv.shape}")
    n, k, h, w = lv.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"softmax_ce target shape {target.shape} != logits B,H,W {(n, h, w)}")
    if not np.issubdtype(target.dtype, np.integer):
        raise LabelRangeError(f"target must hold integer class ids, got dtype {target.dtype}")
    bad = (target < 0) | (target >= k)
    if bad.any():
        coords = [tuple(int(v) for v in c) for c in np.argwhere(bad)[:5]]
        raise LabelRangeError(
            f"{int(bad.sum())} target pixels outside [0, {k}); first (b, row, col): {coords}"
        )
    shifted = lv - lv.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    picked = np.take_along_axis(shifted, target[:, None].astype(np.intp), axis=1)
    count = n * h * w
    value = np.asarray((np.log(denom) - picked).sum() / count, dtype=lv.dtype)

    def vjp(grad, needs):
        d = expz / denom
        np.put_along_axis(d, target[:, None].astype(np.intp),
                          np.take_along_axis(d, target[:, None].astype(np.intp), axis=1) - 1, axis=1)
        return (d * (grad / count),)

    return logits.graph.record("softmax_ce", (logits,), value, vjp)


def sum_all(x: Var) -> Var:
    shape = x.shape
    value = np.asarray(x.value.sum(), dtype=x.value.dtype)
    return x.graph.record("sum", (x,), value, lambda grad, needs: (np.full(shape, grad, dtype=grad.dtype),))


def add(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return g.record("add", (a, b), a.value + b.value, lambda grad, needs: (grad, grad))


def mul(a, b) -> Var:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return g.record("mul", (a, b), av * bv, lambda grad, needs: (grad * bv, grad * av))


def scale(x: Var, factor: float) -> Var:
    f = x.value.dtype.type(factor)
    return x.graph.record("scale", (x,), x.value * f, lambda grad, needs: (grad * f,))


def backward(graph: Graph, root: Var, wrt: Sequence[str] | None = None) -> GradMap:
    """Reverse-mode gradients of scalar ``root`` w.r.t. named parameters.

    ``wrt`` defaults to every parameter registered with ``requires_grad``.
    A registered parameter that did not influence the root gets a zero
    gradient.
    """
    if root.graph is not graph:
        raise ContractError("root does not belong to this graph")
    if root.value.shape != ():
        raise ContractError(f"backward root must be a scalar, got shape {root.value.shape}")
    if wrt is None:
        names = [n for n, i in graph.params.items() if graph.nodes[i].requires_grad]
    else:
        names = list(wrt)
        for name in names:
            if name not in graph.params:
                raise KeyError(f"unknown parameter {name!r}")
    keep = {graph.params[n] for n in names}

    nodes = graph.nodes
    grads: list[np.ndarray | None] = [None] * (root.id + 1)
    grads[root.id] = np.ones((), dtype=root.value.dtype)
    for nid in range(root.id, -1, -1):
        grad = grads[nid]
        node = nodes[nid]
        if grad is None or node.vjp is None:
            continue
        needs = tuple(nodes[i].requires_grad for i in node.inputs)
        for inp, need, g_in in zip(node.inputs, needs, node.vjp(grad, needs)):
            if g_in is None or not need:
                continue
            grads[inp] = g_in if grads[inp] is None else grads[inp] + g_in
        if nid not in keep:
            grads[nid] = None

    out: GradMap = {}
    for name in names:
        pid = graph.params[name]
        value = nodes[pid].value
        g = grads[pid] if pid <= root.id else None
        out[name] = np.zeros_like(value) if g is None else np.ascontiguousarray(g, dtype=value.dtype)
    return out


ScalarFn = Callable[[Graph, dict[str, Var]], Var]


def grad_check(fn: ScalarFn, point: Mapping[str, np.ndarray], eps: float = 1e-6,
               names: Sequence[str] | None = None, max_coords: int | None = None,
               seed: int = 0, oracle_dtype=np.longdouble) -> float:
    """Largest relative error between backward() and central differences.

    ``fn(graph, vars)`` must build a scalar from the named variables. The
    analytic gradient is taken at the dtype of ``point``; the difference
    quotients are evaluated at ``oracle_dtype`` (extended precision by
    default) so that rounding in ``f(x+eps) - f(x-eps)`` does not swamp
    small gradient entries. Every coordinate is perturbed unless
    ``max_coords`` caps the count per parameter (seeded random subset).
    The error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    g = Graph()
    root = fn(g, {name: g.param(name, np.asarray(value)) for name, value in point.items()})
    analytic = backward(g, root, names)
    probe = {k: np.array(v, dtype=oracle_dtype or np.asarray(v).dtype) for k, v in point.items()}
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite analytic gradient for {name!r}")
        flat = probe[name].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        step = flat.dtype.type(eps)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = _evaluate_exact(fn, probe)
            flat[idx] = orig - step
            f_minus = _evaluate_exact(fn, probe)
            flat[idx] = orig
            numeric = float((f_plus - f_minus) / (2 * step))
            a = float(grad.reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst


def _evaluate_exact(fn: ScalarFn, point: Mapping[str, np.ndarray]):
    g = Graph()
    root = fn(g, {name: g.param(name, value, requires_grad=False) for name, value in point.items()})
    v = root.value[()]
    if not np.isfinite(v):
        raise NumericError("function value is not finite")
    return v

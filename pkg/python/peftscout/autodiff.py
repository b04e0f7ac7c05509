"""Reverse-mode automatic differentiation over dense 64-bit arrays.

The engine records every operation on a :class:`ComputeGraph` while it is executed
(define-by-run). The recorded graph can be replayed with new leaf values via
:func:`forward`, which is what :func:`finite_diff_check` relies on.

Broadcasting is limited on purpose: besides same-shape operands, ``add`` and ``mul``
accept a scalar operand or a vector that matches the last axis (bias / gain).

Example:
    >>> graph = ComputeGraph()
    >>> w = graph.leaf(np.array([1.0, 2.0]), name="w", requires_grad=True)
    >>> loss = total(w * w)
    >>> backward(graph, loss)["w"]
    array([2., 4.])
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import special

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands of a graph node have incompatible shapes."""


class GraphError(RuntimeError):
    """Backward pass requested on a graph that cannot be differentiated."""


class Tensor:
    """Dense float64 array with an optional gradient.

    Tensors created by operations know the graph and node that produced them.

    :param values: Array-like values, converted to ``np.float64``.
    :param requires_grad: Should the backward pass populate ``grad``?
    :param name: Name of the tensor, used as key in the gradient map.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "graph", "node_id")

    def __init__(
        self, values: Any, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.graph = None
        self.node_id = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    @property
    def shape(self) -> Tuple[int, ...]:
        """Shape of the values."""
        return self.values.shape

    @property
    def size(self) -> int:
        """Number of entries."""
        return self.values.size

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)


@dataclass
class Node:
    """One recorded operation (or leaf) of a compute graph."""

    kind: str
    inputs: Tuple[int, ...]
    output: Tensor
    attrs: Dict[str, Any] = field(default_factory=dict)
    cache: Dict[str, Any] = field(default_factory=dict)


class ComputeGraph:
    """Ordered record of the operations that produced a set of tensors.

    Node ids are positions in ``nodes``; every input id precedes its consumer, so the
    list itself is a topological order.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.leaves: Dict[str, int] = {}
        self.executed = False

    @property
    def output(self) -> Tensor:
        """Output of the last recorded node.

        :raises GraphError: Graph is empty.
        """
        if not self.nodes:
            raise GraphError("The compute graph is empty.")
        return self.nodes[-1].output

    @property
    def parameters(self) -> Dict[str, Tensor]:
        """Named leaves that require a gradient."""
        return {
            name: self.nodes[nid].output
            for name, nid in self.leaves.items()
            if self.nodes[nid].output.requires_grad
        }

    def leaf(
        self,
        values: Union[Tensor, np.ndarray, float],
        name: Optional[str] = None,
        requires_grad: bool = False,
    ) -> Tensor:
        """Register an input tensor on the graph.

        :param values: Values, or a tensor whose values are wrapped (not copied).
        :param name: Name to bind / query the leaf with. Unnamed leaves are constants.
        :param requires_grad: Should a gradient be computed for this leaf?

        :return: Leaf tensor.

        :raises ValueError: Leaf name is used twice.
        """
        if isinstance(values, Tensor):
            tensor = values
            tensor.requires_grad = requires_grad or tensor.requires_grad
            if name is None:
                name = tensor.name
        else:
            tensor = Tensor(values, requires_grad=requires_grad, name=name)
        tensor.name = name

        if name is not None:
            if name in self.leaves:
                raise ValueError(f"A leaf named {name!r} already exists in the graph.")
            self.leaves[name] = len(self.nodes)

        self._append(Node("leaf", (), tensor))
        return tensor

    def constant(self, values: Union[np.ndarray, float]) -> Tensor:
        """Register an unnamed leaf without gradient (a detached value)."""
        return self.leaf(np.array(values, dtype=np.float64))

    def bind(self, name: str, values: Union[Tensor, np.ndarray]) -> None:
        """Replace the values of a named leaf; the graph must be re-run afterwards.

        :param name: Name of the leaf.
        :param values: New values, same shape as the current ones.

        :raises KeyError: No leaf with this name.
        :raises ShapeError: Shape differs from the bound leaf.
        """
        if name not in self.leaves:
            raise KeyError(f"The graph has no input named {name!r}.")
        leaf = self.nodes[self.leaves[name]].output
        new = values.values if isinstance(values, Tensor) else np.asarray(values)
        if new.shape != leaf.shape:
            raise ShapeError(
                f"Input {name!r}: expected shape {leaf.shape}, got {new.shape}."
            )
        leaf.values = np.array(new, dtype=np.float64)
        self.executed = False

    def record(self, kind: str, inputs: Tuple[Tensor, ...], **attrs: Any) -> Tensor:
        """Execute an operation and append it to the graph.

        :param kind: Operation kind, a key of ``OPERATIONS``.
        :param inputs: Input tensors, all on this graph.
        :param attrs: Non-differentiable operation attributes.

        :return: Output tensor.

        :raises GraphError: An input lives on a different graph.
        """
        for inp in inputs:
            if inp.graph is not self:
                raise GraphError(
                    f"Input {inp!r} of a {kind} node is not part of this graph."
                )
        node_id = len(self.nodes)
        node = Node(
            kind,
            tuple(inp.node_id for inp in inputs),
            Tensor(0.0, requires_grad=any(inp.requires_grad for inp in inputs)),
            attrs,
        )
        _evaluate(node, node_id, [inp.values for inp in inputs])
        self._append(node)
        self.executed = True
        return node.output

    def _append(self, node: Node) -> None:
        node.output.graph = self
        node.output.node_id = len(self.nodes)
        self.nodes.append(node)


# OPERATIONS #


def _shape_error(kind: str, node_id: int, expected: Any, actual: Any) -> ShapeError:
    return ShapeError(
        f"{kind} node {node_id}: expected shape {expected}, got {actual}."
    )


def _is_scalar(arr: np.ndarray) -> bool:
    return arr.size == 1 and arr.ndim <= 1


def _check_broadcast(kind: str, node_id: int, a: np.ndarray, b: np.ndarray) -> str:
    """Classify the broadcast rule that applies to ``a op b``."""
    if a.shape == b.shape:
        return "same"
    if _is_scalar(b):
        return "scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row"
    raise _shape_error(kind, node_id, a.shape, b.shape)


def _reduce_to(grad: np.ndarray, rule: str, shape: Tuple[int, ...]) -> np.ndarray:
    if rule == "same":
        return grad
    if rule == "scalar":
        return np.full(shape, grad.sum())
    return grad.reshape(-1, shape[0]).sum(axis=0)


def _add_fwd(vals, attrs, cache, nid):
    a, b = vals
    cache["rule"] = _check_broadcast("add", nid, a, b)
    if cache["rule"] == "scalar":
        return a + b.reshape(())
    return a + b


def _add_bwd(g, vals, out, attrs, cache):
    return [g, _reduce_to(g, cache["rule"], vals[1].shape)]


def _mul_fwd(vals, attrs, cache, nid):
    a, b = vals
    cache["rule"] = _check_broadcast("mul", nid, a, b)
    if cache["rule"] == "scalar":
        return a * b.reshape(())
    return a * b


def _mul_bwd(g, vals, out, attrs, cache):
    a, b = vals
    rule = cache["rule"]
    b_b = b.reshape(()) if rule == "scalar" else b
    return [g * b_b, _reduce_to(g * a, rule, b.shape)]


def _scale_fwd(vals, attrs, cache, nid):
    return vals[0] * attrs["factor"]


def _scale_bwd(g, vals, out, attrs, cache):
    return [g * attrs["factor"]]


def _matmul_fwd(vals, attrs, cache, nid):
    a, b = vals
    if a.ndim < 2 or b.ndim not in (2, a.ndim) or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", nid, f"(..., k) @ (k, n) [k={a.shape[-1]}]", b.shape)
    if b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise _shape_error("matmul", nid, f"batch {a.shape[0]}", b.shape)
    return a @ b


def _matmul_bwd(g, vals, out, attrs, cache):
    a, b = vals
    if b.ndim == 2:
        ga = g @ b.T
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
    return [ga, gb]


def _softmax_fwd(vals, attrs, cache, nid):
    return special.softmax(vals[0], axis=-1)


def _softmax_bwd(g, vals, out, attrs, cache):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _layernorm_fwd(vals, attrs, cache, nid):
    x = vals[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + attrs["eps"])
    xhat = (x - mu) * inv
    cache["inv"] = inv
    return xhat


def _layernorm_bwd(g, vals, out, attrs, cache):
    n = out.shape[-1]
    inv = cache["inv"]
    gsum = g.sum(axis=-1, keepdims=True)
    gx = (g * out).sum(axis=-1, keepdims=True)
    return [inv / n * (n * g - gsum - out * gx)]


def _gelu_fwd(vals, attrs, cache, nid):
    x = vals[0]
    return 0.5 * x * (1.0 + special.erf(x / _SQRT2))


def _gelu_bwd(g, vals, out, attrs, cache):
    x = vals[0]
    cdf = 0.5 * (1.0 + special.erf(x / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return [g * (cdf + x * pdf)]


def _embedding_fwd(vals, attrs, cache, nid):
    table = vals[0]
    ids = attrs["ids"]
    if table.ndim != 2:
        raise _shape_error("embedding", nid, "(vocab, dim)", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding node {nid}: ids must lie in [0, {table.shape[0]}), "
            f"got range [{ids.min()}, {ids.max()}]."
        )
    return table[ids]


def _embedding_bwd(g, vals, out, attrs, cache):
    gt = np.zeros_like(vals[0])
    np.add.at(gt, attrs["ids"], g)
    return [gt]


def _cross_entropy_fwd(vals, attrs, cache, nid):
    logits = vals[0]
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error(
            "cross_entropy", nid, f"logits (m, c) with {labels.shape[0]} rows", logits.shape
        )
    logp = special.log_softmax(logits, axis=-1)
    cache["probs"] = np.exp(logp)
    return np.array(-np.mean(logp[np.arange(len(labels)), labels]))


def _cross_entropy_bwd(g, vals, out, attrs, cache):
    labels = attrs["labels"]
    grad = cache["probs"].copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    return [grad * (g / len(labels))]


def _sum_fwd(vals, attrs, cache, nid):
    return np.array(vals[0].sum())


def _sum_bwd(g, vals, out, attrs, cache):
    return [np.full(vals[0].shape, float(g))]


def _mean_fwd(vals, attrs, cache, nid):
    return vals[0].mean(axis=attrs["axis"])


def _mean_bwd(g, vals, out, attrs, cache):
    axis = attrs["axis"]
    n = vals[0].shape[axis]
    return [np.repeat(np.expand_dims(g, axis), n, axis=axis) / n]


def _reshape_fwd(vals, attrs, cache, nid):
    x = vals[0]
    if int(np.prod(attrs["shape"])) != x.size:
        raise _shape_error("reshape", nid, attrs["shape"], x.shape)
    return x.reshape(attrs["shape"])


def _reshape_bwd(g, vals, out, attrs, cache):
    return [g.reshape(vals[0].shape)]


def _permute_fwd(vals, attrs, cache, nid):
    x = vals[0]
    if sorted(attrs["axes"]) != list(range(x.ndim)):
        raise _shape_error("permute", nid, f"axes of a {x.ndim}-d array", attrs["axes"])
    return np.ascontiguousarray(np.transpose(x, attrs["axes"]))


def _permute_bwd(g, vals, out, attrs, cache):
    return [np.transpose(g, np.argsort(attrs["axes"]))]


def _getitem_fwd(vals, attrs, cache, nid):
    try:
        return np.array(vals[0][attrs["index"]], dtype=np.float64)
    except IndexError as err:
        raise ShapeError(f"getitem node {nid}: {err}") from err


def _getitem_bwd(g, vals, out, attrs, cache):
    gx = np.zeros_like(vals[0])
    gx[attrs["index"]] = g
    return [gx]


def _straight_through_fwd(vals, attrs, cache, nid):
    hard = np.asarray(attrs["hard"], dtype=np.float64)
    if hard.shape != vals[0].shape:
        raise _shape_error("straight_through", nid, vals[0].shape, hard.shape)
    return hard.copy()


def _straight_through_bwd(g, vals, out, attrs, cache):
    return [g]


OPERATIONS: Dict[str, Tuple[Callable, Callable]] = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "embedding": (_embedding_fwd, _embedding_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "permute": (_permute_fwd, _permute_bwd),
    "getitem": (_getitem_fwd, _getitem_bwd),
    "straight_through": (_straight_through_fwd, _straight_through_bwd),
}


def _evaluate(node: Node, node_id: int, values: List[np.ndarray]) -> None:
    fwd, _ = OPERATIONS[node.kind]
    node.cache = {}
    node.output.values = np.asarray(
        fwd(values, node.attrs, node.cache, node_id), dtype=np.float64
    )


# PUBLIC OPERATION WRAPPERS #


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a scalar or a last-axis vector."""
    return a.graph.record("add", (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a scalar or a last-axis vector."""
    return a.graph.record("mul", (a, b))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    return a.graph.record("scale", (a,), factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``(..., k) @ (k, n)`` or batched ``(b, m, k) @ (b, k, n)``."""
    return a.graph.record("matmul", (a, b))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    return a.graph.record("softmax", (a,))


def layer_norm(a: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    return a.graph.record("layernorm", (a,), eps=eps)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    return a.graph.record("gelu", (a,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` for integer ``ids`` of any shape."""
    return table.graph.record("embedding", (table,), ids=np.asarray(ids, dtype=np.int64))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(m, c)`` logits against integer labels."""
    return logits.graph.record(
        "cross_entropy", (logits,), labels=np.asarray(labels, dtype=np.int64)
    )


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    return a.graph.record("sum", (a,))


def mean(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis."""
    return a.graph.record("mean", (a,), axis=axis)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Reshape (copying semantics, no views)."""
    return a.graph.record("reshape", (a,), shape=tuple(shape))


def permute(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    """Permute the axes."""
    return a.graph.record("permute", (a,), axes=tuple(axes))


def getitem(a: Tensor, index: Any) -> Tensor:
    """Basic indexing / slicing, e.g. ``a[:, :4]`` or ``a[3, 1]``."""
    return a.graph.record("getitem", (a,), index=index)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Return ``hard`` in the forward pass while gradients flow into ``soft``."""
    return soft.graph.record("straight_through", (soft,), hard=np.asarray(hard))


# GRAPH EXECUTION #


def forward(graph: ComputeGraph, bindings: Optional[Dict[str, Any]] = None) -> Tensor:
    """Re-run a recorded graph with new values for (some of) its named inputs.

    :param graph: Recorded compute graph.
    :param bindings: Mapping of leaf name to tensor or array. Unbound leaves keep
        their current values.

    :return: Output tensor of the graph (last node).

    :raises KeyError: A binding names an unknown input.
    :raises ShapeError: A binding has the wrong shape, or an operation fails its
        shape check.
    """
    for name, values in (bindings or {}).items():
        graph.bind(name, values)

    for node_id, node in enumerate(graph.nodes):
        if node.kind == "leaf":
            continue
        _evaluate(node, node_id, [graph.nodes[i].output.values for i in node.inputs])

    graph.executed = True
    return graph.output


def backward(graph: ComputeGraph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Back-propagate a scalar loss through the graph.

    Every leaf with ``requires_grad`` receives a ``grad`` (zeros if it does not
    influence the loss). Tensors without ``requires_grad`` are left untouched.

    :param graph: Graph that produced ``loss``.
    :param loss: Scalar output tensor.

    :return: Gradient arrays of the named leaves that require a gradient.

    :raises GraphError: Forward pass not executed, loss not scalar, or loss not part
        of the graph.
    """
    if not graph.executed:
        raise GraphError("Backward called before the forward pass was executed.")
    if loss.graph is not graph:
        raise GraphError("The loss tensor is not part of this graph.")
    if loss.size != 1:
        raise GraphError(f"The loss must be a scalar, got shape {loss.shape}.")

    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}

    for node_id in range(loss.node_id, -1, -1):
        node = graph.nodes[node_id]
        g = grads.pop(node_id, None)
        if node.kind == "leaf":
            if node.output.requires_grad:
                node.output.grad = g if g is not None else np.zeros(node.output.shape)
            continue
        if g is None or not node.output.requires_grad:
            continue

        inputs = [graph.nodes[i].output for i in node.inputs]
        _, bwd = OPERATIONS[node.kind]
        input_grads = bwd(g, [inp.values for inp in inputs], node.output.values,
                          node.attrs, node.cache)
        for inp, gin in zip(inputs, input_grads):  # noqa: B905
            if not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + gin
            else:
                grads[inp.node_id] = np.asarray(gin, dtype=np.float64)

    # leaves recorded after the loss cannot influence it
    for node in graph.nodes[loss.node_id + 1 :]:
        if node.kind == "leaf" and node.output.requires_grad:
            node.output.grad = np.zeros(node.output.shape)

    return {
        name: graph.nodes[nid].output.grad
        for name, nid in graph.leaves.items()
        if graph.nodes[nid].output.requires_grad
    }


def finite_diff_check(graph: ComputeGraph, parameter: str, step: float = 1e-5) -> float:
    """Compare the analytic gradient of one input against central differences.

    The graph output must be a scalar loss. The graph is left in its original state.

    :param graph: Recorded graph with a scalar output.
    :param parameter: Name of the input to check.
    :param step: Finite-difference step, in (0, 1e-2].

    :return: Max over entries of ``|analytic - numeric| / (|numeric| + 1e-12)``.

    :raises ValueError: Step out of range.
    :raises KeyError: Unknown parameter.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError("The finite-difference step must lie in (0, 1e-2].")
    if parameter not in graph.leaves:
        raise KeyError(f"The graph has no input named {parameter!r}.")

    leaf = graph.nodes[graph.leaves[parameter]].output
    needs_grad = leaf.requires_grad
    leaf.requires_grad = True
    _propagate_requires_grad(graph)
    try:
        loss = forward(graph)
        analytic = backward(graph, loss)[parameter].copy()
        original = leaf.values.copy()

        numeric = np.zeros_like(original)
        for idx in np.ndindex(original.shape):
            shifted = original.copy()
            shifted[idx] += step
            up = float(forward(graph, {parameter: shifted}).values)
            shifted[idx] -= 2.0 * step
            down = float(forward(graph, {parameter: shifted}).values)
            numeric[idx] = (up - down) / (2.0 * step)

        forward(graph, {parameter: original})
    finally:
        leaf.requires_grad = needs_grad
        _propagate_requires_grad(graph)

    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)))


def _propagate_requires_grad(graph: ComputeGraph) -> None:
    """Recompute the ``requires_grad`` flags of all operation outputs from the leaves."""
    for node in graph.nodes:
        if node.kind != "leaf":
            node.output.requires_grad = any(
                graph.nodes[i].output.requires_grad for i in node.inputs
            )

"""Tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest

import peftscout.autodiff as ad

FD_TOL = 1e-4


def weighted_loss(graph: ad.ComputeGraph, out: ad.Tensor, seed: int = 1) -> ad.Tensor:
    """Scalar loss ``sum(out * R)`` with a fixed random ``R``."""
    r = np.random.default_rng(seed).uniform(-1, 1, size=out.shape)
    return ad.total(ad.mul(out, graph.constant(r)))


def uniform(rng, *shape):
    """Random values in [-1, 1]."""
    return rng.uniform(-1.0, 1.0, size=shape)


# each builder records one operation on the leaf named "x" (and maybe "y")
OP_BUILDERS = {
    "add_same": lambda g, rng: ad.add(
        g.leaf(uniform(rng, 3, 4), "x", True), g.leaf(uniform(rng, 3, 4), "y", True)
    ),
    "add_row": lambda g, rng: ad.add(
        g.leaf(uniform(rng, 2, 3, 4), "x", True), g.leaf(uniform(rng, 4), "y", True)
    ),
    "mul_same": lambda g, rng: ad.mul(
        g.leaf(uniform(rng, 3, 4), "x", True), g.leaf(uniform(rng, 3, 4), "y", True)
    ),
    "mul_row": lambda g, rng: ad.mul(
        g.leaf(uniform(rng, 3, 4), "x", True), g.leaf(uniform(rng, 4), "y", True)
    ),
    "mul_scalar": lambda g, rng: ad.mul(
        g.leaf(uniform(rng, 3, 4), "x", True), g.leaf(np.array(0.7), "y", True)
    ),
    "scale": lambda g, rng: ad.scale(g.leaf(uniform(rng, 3, 4), "x", True), -1.5),
    "matmul": lambda g, rng: ad.matmul(
        g.leaf(uniform(rng, 2, 3, 4), "x", True), g.leaf(uniform(rng, 4, 5), "y", True)
    ),
    "matmul_batched": lambda g, rng: ad.matmul(
        g.leaf(uniform(rng, 2, 3, 4), "x", True), g.leaf(uniform(rng, 2, 4, 3), "y", True)
    ),
    "softmax": lambda g, rng: ad.softmax(g.leaf(uniform(rng, 3, 5), "x", True)),
    "layer_norm": lambda g, rng: ad.layer_norm(g.leaf(uniform(rng, 3, 6), "x", True)),
    "gelu": lambda g, rng: ad.gelu(g.leaf(uniform(rng, 3, 4), "x", True)),
    "mean": lambda g, rng: ad.mean(g.leaf(uniform(rng, 2, 3, 4), "x", True), axis=1),
    "reshape": lambda g, rng: ad.reshape(g.leaf(uniform(rng, 2, 6), "x", True), (3, 4)),
    "permute": lambda g, rng: ad.permute(
        g.leaf(uniform(rng, 2, 3, 4), "x", True), (0, 2, 1)
    ),
    "getitem": lambda g, rng: ad.getitem(
        g.leaf(uniform(rng, 4, 5), "x", True), (slice(None), slice(0, 3))
    ),
    "embedding": lambda g, rng: ad.embedding(
        g.leaf(uniform(rng, 5, 3), "x", True), np.array([[0, 2, 2], [4, 1, 0]])
    ),
}


@pytest.mark.parametrize("op", sorted(OP_BUILDERS))
@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4, 5, 6])
def test_operation_gradients(op, seed):
    """Every operation agrees with central finite differences."""
    rng = np.random.default_rng(seed)
    graph = ad.ComputeGraph()
    out = OP_BUILDERS[op](graph, rng)
    weighted_loss(graph, out, seed=seed + 100)

    for name in graph.parameters:
        assert ad.finite_diff_check(graph, name, step=1e-5) <= FD_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cross_entropy_gradient_fd(seed):
    """Cross-entropy agrees with finite differences."""
    rng = np.random.default_rng(seed)
    graph = ad.ComputeGraph()
    logits = graph.leaf(uniform(rng, 4, 3), "logits", True)
    ad.cross_entropy(logits, np.array([0, 2, 1, 2]))
    assert ad.finite_diff_check(graph, "logits") <= FD_TOL


def test_square_gradient():
    """Gradient of sum(w * w) is 2w."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([1.0, 2.0]), name="w", requires_grad=True)
    loss = ad.total(w * w)
    grads = ad.backward(graph, loss)
    np.testing.assert_allclose(grads["w"], [2.0, 4.0])
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_cross_entropy_closed_form():
    """Gradient of the mean cross-entropy is (p - onehot) / m."""
    graph = ad.ComputeGraph()
    values = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]])
    labels = np.array([0, 1])
    logits = graph.leaf(values, name="logits", requires_grad=True)
    loss = ad.cross_entropy(logits, labels)

    probs = np.exp(values) / np.exp(values).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(ad.backward(graph, loss)["logits"], (probs - onehot) / 2)


def test_quadratic_finite_difference_exact():
    """Central differences are exact for a quadratic up to rounding."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([0.7]), name="w", requires_grad=True)
    ad.total(w * w)
    assert ad.finite_diff_check(graph, "w", step=1e-3) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradients(seed):
    """Three-layer MLP with GELU and layer norm: all parameters match."""
    rng = np.random.default_rng(seed)
    graph = ad.ComputeGraph()
    x = graph.leaf(uniform(rng, 4, 5))
    h = x
    for layer, (d_in, d_out) in enumerate([(5, 6), (6, 6), (6, 3)]):
        w = graph.leaf(uniform(rng, d_in, d_out), f"w{layer}", True)
        b = graph.leaf(uniform(rng, d_out), f"b{layer}", True)
        h = ad.add(ad.matmul(h, w), b)
        if layer < 2:
            h = ad.gelu(ad.layer_norm(h))
    ad.cross_entropy(h, np.array([0, 1, 2, 1]))

    for name in graph.parameters:
        assert ad.finite_diff_check(graph, name) <= FD_TOL


def test_finite_diff_leaf_without_grad():
    """A leaf that did not require a gradient can still be checked."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([0.3, -0.2]), name="w")
    ad.total(ad.gelu(w))
    assert ad.finite_diff_check(graph, "w") <= FD_TOL
    assert not w.requires_grad
    assert not graph.output.requires_grad


def test_straight_through():
    """Forward returns the hard values, gradients flow into the soft input."""
    graph = ad.ComputeGraph()
    soft = graph.leaf(np.array([0.2, 0.8]), name="soft", requires_grad=True)
    hard = ad.straight_through(soft, np.array([0.0, 1.0]))
    np.testing.assert_array_equal(hard.values, [0.0, 1.0])
    loss = ad.total(ad.mul(hard, graph.constant(np.array([3.0, -2.0]))))
    np.testing.assert_array_equal(ad.backward(graph, loss)["soft"], [3.0, -2.0])


def test_backward_deterministic(rng):
    """Identical graphs and inputs give bitwise identical gradients."""
    values = uniform(rng, 3, 4)

    def grads():
        graph = ad.ComputeGraph()
        x = graph.leaf(values, "x", True)
        loss = weighted_loss(graph, ad.softmax(ad.layer_norm(x)))
        return ad.backward(graph, loss)["x"]

    np.testing.assert_array_equal(grads(), grads())


def test_unused_embedding_row_zero_gradient(rng):
    """A loss that ignores an embedding row gives it a zero gradient."""
    graph = ad.ComputeGraph()
    table = graph.leaf(uniform(rng, 4, 3), "table", True)
    loss = weighted_loss(graph, ad.embedding(table, np.array([0, 1, 1])))
    grad = ad.backward(graph, loss)["table"]
    assert grad[3].sum() == 0.0
    assert grad[2].sum() == 0.0


def test_leaf_after_loss_zero_gradient():
    """Leaves recorded after the loss get zero gradients."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([1.0]), "w", True)
    loss = ad.total(w * w)
    late = graph.leaf(np.array([5.0, 5.0]), "late", True)
    grads = ad.backward(graph, loss)
    np.testing.assert_array_equal(grads["late"], np.zeros(2))
    np.testing.assert_array_equal(late.grad, np.zeros(2))


def test_forward_replay(rng):
    """Re-running a graph with new inputs equals recording it afresh."""
    x0, x1 = uniform(rng, 2, 3), uniform(rng, 2, 3)

    graph = ad.ComputeGraph()
    x = graph.leaf(x0, "x", True)
    ad.total(ad.gelu(ad.scale(x, 2.0)))
    replayed = ad.forward(graph, {"x": x1}).values

    fresh = ad.ComputeGraph()
    ad.total(ad.gelu(ad.scale(fresh.leaf(x1, "x"), 2.0)))
    assert replayed == fresh.output.values


def test_backward_before_forward():
    """Backward on a graph that was never executed raises GraphError."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array(1.0), "w", True)
    with pytest.raises(ad.GraphError):
        ad.backward(graph, w)


def test_backward_after_bind():
    """Binding new values requires a forward pass before backward."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([1.0]), "w", True)
    loss = ad.total(w * w)
    graph.bind("w", np.array([2.0]))
    with pytest.raises(ad.GraphError):
        ad.backward(graph, loss)


def test_backward_non_scalar():
    """Non-scalar losses are rejected."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([1.0, 2.0]), "w", True)
    out = ad.scale(w, 2.0)
    with pytest.raises(ad.GraphError):
        ad.backward(graph, out)


def test_shape_error_matmul():
    """Matrix products with mismatched inner dimensions raise ShapeError."""
    graph = ad.ComputeGraph()
    a = graph.leaf(np.zeros((2, 3)))
    b = graph.leaf(np.zeros((4, 2)))
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(a, b)
    assert "matmul" in err.value.args[0]


def test_shape_error_add():
    """Operands that cannot broadcast raise ShapeError, a ValueError."""
    graph = ad.ComputeGraph()
    a = graph.leaf(np.zeros((2, 3)))
    b = graph.leaf(np.zeros(2))
    with pytest.raises(ValueError):
        ad.add(a, b)


def test_inputs_from_other_graph():
    """Mixing tensors of two graphs raises GraphError."""
    a = ad.ComputeGraph().leaf(np.zeros(2))
    b = ad.ComputeGraph().leaf(np.zeros(2))
    with pytest.raises(ad.GraphError):
        ad.add(a, b)


def test_leaf_name_twice():
    """Leaf names are unique per graph."""
    graph = ad.ComputeGraph()
    graph.leaf(np.zeros(2), "w")
    with pytest.raises(ValueError):
        graph.leaf(np.zeros(2), "w")


def test_bind_errors():
    """Unknown names raise KeyError, wrong shapes ShapeError."""
    graph = ad.ComputeGraph()
    graph.leaf(np.zeros(2), "w")
    with pytest.raises(KeyError):
        graph.bind("v", np.zeros(2))
    with pytest.raises(ad.ShapeError):
        graph.bind("w", np.zeros(3))


@pytest.mark.parametrize("step", [0.0, -1e-5, 0.1])
def test_finite_diff_step_range(step):
    """The finite-difference step must lie in (0, 1e-2]."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([1.0]), "w", True)
    ad.total(w * w)
    with pytest.raises(ValueError):
        ad.finite_diff_check(graph, "w", step=step)


def test_finite_diff_restores_values():
    """The checked input holds its original values afterwards."""
    graph = ad.ComputeGraph()
    w = graph.leaf(np.array([0.5, -0.5]), "w", True)
    ad.total(w * w)
    ad.finite_diff_check(graph, "w")
    np.testing.assert_array_equal(w.values, [0.5, -0.5])
    assert graph.output.values == 0.5

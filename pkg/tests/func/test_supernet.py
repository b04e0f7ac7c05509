"""Tests for the PEFT search space and the supernet forward pass."""

from dataclasses import replace

import numpy as np
import pytest

import peftscout.autodiff as ad
from peftscout.backbone import BackboneConfig, Position, build_backbone
from peftscout.selector import SelectionState
from peftscout.supernet import (
    ArchWeights,
    MixMode,
    ModuleSite,
    SpaceConfig,
    SupernetState,
    enumerate_sites,
    forward_with_peft,
    materialize_architecture,
    mix_site_output,
    module_forward,
    param_count,
)


def randomize_weights(supernet: SupernetState, seed: int = 0) -> None:
    """Give every site non-zero weights so that deltas are visible."""
    rng = np.random.default_rng(seed)
    for site in supernet.sites:
        for key, arr in site.weights.items():
            site.weights[key] = rng.normal(0.0, 0.3, size=arr.shape)


# SITES #


def test_enumerate_default_space():
    """Default backbone and space give 32 sites, grouped by kind."""
    backbone = build_backbone(BackboneConfig(), seed=0)
    sites = enumerate_sites(backbone, SpaceConfig())
    kinds = [site.kind for site in sites]
    assert len(sites) == 32
    assert kinds.count("LoRA") == 12
    assert kinds.count("AdapterLR") == 4
    assert kinds.count("BitFit") == 14
    assert kinds.count("LNFit") == 2
    assert [site.index for site in sites] == list(range(32))
    assert sites[0].name == "layer0.Q.LoRA"


def test_enumerate_lora_only():
    """LoRA alone attaches to the twelve linear positions."""
    backbone = build_backbone(BackboneConfig(), seed=0)
    sites = enumerate_sites(backbone, SpaceConfig(kinds=("LoRA",)))
    assert len(sites) == 12
    assert all(site.position.is_linear for site in sites)


def test_enumerate_ffn_layer_norm():
    """The feed-forward layer norm adds one BitFit and one LNFit site per layer."""
    backbone = build_backbone(BackboneConfig(ffn_layer_norm=True), seed=0)
    assert len(enumerate_sites(backbone, SpaceConfig())) == 36


def test_enumerate_placement(tiny_backbone):
    """A placement restricts the positions of a kind."""
    space = SpaceConfig(kinds=("LoRA",), placement={"LoRA": ["Q", "V"]})
    sites = enumerate_sites(tiny_backbone, space)
    assert [site.name for site in sites] == ["layer0.Q.LoRA", "layer0.V.LoRA"]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kinds": ("Prefix",)},
        {"kinds": ("LoRA", "LoRA")},
        {"dims": (4, 1)},
        {"dims": (0, 4)},
        {"dims": ()},
        {"placement": {"LNFit": ["Q"]}},
        {"kinds": ("LoRA",), "placement": {"BitFit": ["Q"]}},
    ],
)
def test_space_config_invalid(kwargs):
    """Invalid search spaces raise a ValueError."""
    with pytest.raises(ValueError):
        SpaceConfig(**kwargs)


@pytest.mark.parametrize(
    "kind, dim, expected",
    [("LoRA", 4, 256), ("LoRA", 1, 64), ("AdapterLR", 8, 512), ("BitFit", 8, 32), ("LNFit", 1, 32)],
)
def test_param_count(kind, dim, expected):
    """Parameter counts of the PEFT kinds at a 32 x 32 position."""
    assert param_count(kind, Position(0, "O", 32, 32), dim) == expected


def test_param_count_unknown():
    """Unknown kinds raise a ValueError."""
    with pytest.raises(ValueError):
        param_count("Prefix", Position(0, "O", 32, 32), 1)


def test_site_q(tiny_backbone):
    """Parameter counts per candidate of a LoRA site at an 8 x 16 position."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    w1 = next(site for site in sites if site.position.kind == "W1")
    np.testing.assert_array_equal(w1.q, [24, 96, 192])


def test_zero_init(tiny_backbone):
    """LoRA B, adapter up-projections, BitFit biases and LNFit scales start at zero."""
    for site in enumerate_sites(tiny_backbone, SpaceConfig()):
        key = {"LoRA": "B", "AdapterLR": "up", "BitFit": "bias", "LNFit": "scale"}[site.kind]
        assert not site.weights[key].any()


# FORWARD #


def test_zero_init_identity(tiny_backbone, tiny_data):
    """A fresh supernet computes the backbone function exactly."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    _, base = tiny_backbone.loss(tiny_data.val)
    _, mixed = forward_with_peft(tiny_backbone, tiny_data.val, supernet, MixMode.soft())
    np.testing.assert_array_equal(base.values, mixed.values)


def test_mixed_loss_permutation_equivariant(tiny_backbone, tiny_data):
    """With PEFT modules mixed in, permuting the examples keeps the loss."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    randomize_weights(supernet)
    batch = tiny_data.val
    perm = np.random.default_rng(6).permutation(len(batch))
    loss, logits = forward_with_peft(tiny_backbone, batch, supernet, MixMode.soft())
    loss_p, logits_p = forward_with_peft(
        tiny_backbone, batch.subset(perm), supernet, MixMode.soft()
    )
    np.testing.assert_allclose(logits_p.values, logits.values[perm], rtol=1e-10, atol=1e-12)
    assert float(loss_p.values) == pytest.approx(float(loss.values), rel=1e-10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_discrete_gates_off_equal_absent(tiny_backbone, tiny_data, seed):
    """Switching sites off equals building the space without them."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    randomize_weights(supernet, seed)
    rng = np.random.default_rng(seed)
    n = supernet.num_sites
    keep = rng.integers(0, 2, size=n)
    dims = [site.dims[-1] for site in supernet.sites]

    _, full = forward_with_peft(
        tiny_backbone, tiny_data.val, supernet, MixMode.discrete(keep, dims)
    )

    kept = np.flatnonzero(keep)
    sites = [replace(supernet.sites[i], index=it) for it, i in enumerate(kept)]
    reduced = SupernetState(
        sites,
        ArchWeights.zeros(len(sites), 3),
        SelectionState.initial([True] * len(sites), Z=1),
    )
    _, absent = forward_with_peft(
        tiny_backbone,
        tiny_data.val,
        reduced,
        MixMode.discrete([1] * len(sites), [dims[i] for i in kept]),
    )
    np.testing.assert_array_equal(full.values, absent.values)


def test_soft_gate_off_equals_removed(tiny_backbone, tiny_data):
    """A keep probability of exactly zero equals a removed site."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    randomize_weights(supernet)
    off = [0, 3, 7]
    supernet.arch.theta[off] = [0.0, -1e4]
    _, gated = forward_with_peft(tiny_backbone, tiny_data.val, supernet, MixMode.soft())

    supernet.selection.remove(off)
    _, removed = forward_with_peft(tiny_backbone, tiny_data.val, supernet, MixMode.soft())
    np.testing.assert_array_equal(gated.values, removed.values)


def test_entangled_slicing_exact(tiny_backbone, rng):
    """A rank-4 slice of the max-rank block equals an independent rank-4 module."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    site = sites[0]
    site.weights = {key: rng.normal(size=arr.shape) for key, arr in site.weights.items()}
    small = ModuleSite(
        index=0,
        kind="LoRA",
        position=site.position,
        dims=(4,),
        q=site.q[1:2],
        weights={key: arr.copy() for key, arr in site.active_weights(4).items()},
    )
    x_val = rng.normal(size=(2, 3, 8))

    def delta(s):
        graph = ad.ComputeGraph()
        x = graph.leaf(x_val)
        weights = {key: graph.leaf(arr) for key, arr in s.weights.items()}
        return module_forward(s, weights, 4, x, x).values

    np.testing.assert_allclose(delta(site), delta(small), rtol=1e-13, atol=1e-15)


def test_mix_site_output_removed(tiny_backbone, rng):
    """Removed sites contribute exact zeros."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    sites[0].weights = {k: rng.normal(size=a.shape) for k, a in sites[0].weights.items()}
    selection = SelectionState.initial([False] * len(sites), Z=1)
    selection.remove([0])
    graph = ad.ComputeGraph()
    x = graph.leaf(rng.normal(size=(2, 8)))
    out = mix_site_output(
        sites[0], ArchWeights.zeros(len(sites), 3), selection, x, MixMode.soft()
    )
    np.testing.assert_array_equal(out.values, np.zeros((2, 8)))


def test_mix_site_output_soft_mixture(tiny_backbone, rng):
    """Soft mixing weighs the ranks by their probabilities and the keep gate."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    site = sites[2]
    site.weights = {k: rng.normal(size=a.shape) for k, a in site.weights.items()}
    arch = ArchWeights.zeros(len(sites), 3)
    arch.theta[2] = [0.0, np.log(3.0)]  # keep probability 0.75
    arch.phi[2] = np.log([0.2, 0.3, 0.5])
    selection = SelectionState.initial([False] * len(sites), Z=1)
    x_val = rng.normal(size=(3, 8))

    graph = ad.ComputeGraph()
    out = mix_site_output(site, arch, selection, graph.leaf(x_val), MixMode.soft())

    A, B = site.weights["A"], site.weights["B"]
    expected = sum(
        p * (x_val @ A[:, :r] @ B[:r]) for p, r in zip([0.2, 0.3, 0.5], (1, 4, 8))
    )
    np.testing.assert_allclose(out.values, 0.75 * expected, rtol=1e-12, atol=1e-12)


def test_mix_site_output_width(tiny_backbone):
    """Inputs of the wrong width are rejected."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    graph = ad.ComputeGraph()
    with pytest.raises(ValueError):
        mix_site_output(
            sites[0],
            ArchWeights.zeros(len(sites), 3),
            SelectionState.initial([False] * len(sites), Z=1),
            graph.leaf(np.zeros((2, 5))),
            MixMode.soft(),
        )


def test_discrete_invalid_dim(tiny_backbone, tiny_data):
    """A kept site without a valid dimension cannot run in discrete mode."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    n = supernet.num_sites
    mode = MixMode.discrete([1] * n, [None] + [4] * (n - 1))
    with pytest.raises(ValueError):
        forward_with_peft(tiny_backbone, tiny_data.val, supernet, mode)


def test_mix_mode_invalid():
    """Unknown modes and inconsistent discrete vectors are rejected."""
    with pytest.raises(ValueError):
        MixMode("hard")
    with pytest.raises(ValueError):
        MixMode.discrete([1, 1], [4])


def test_gumbel_needs_rng(tiny_backbone, tiny_data):
    """Gumbel sampling without a random generator raises ValueError."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    with pytest.raises(ValueError):
        forward_with_peft(tiny_backbone, tiny_data.val, supernet, MixMode.gumbel_hard())


def test_unknown_grad_target(tiny_backbone, tiny_data):
    """Unknown gradient targets raise ValueError."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    with pytest.raises(ValueError):
        forward_with_peft(
            tiny_backbone, tiny_data.val, supernet, MixMode.soft(), grad={"backbone"}
        )


def test_alignment(tiny_backbone, tiny_data):
    """A supernet built on another backbone does not align."""
    other = build_backbone(BackboneConfig(), seed=0)
    supernet = SupernetState.build(other, SpaceConfig())
    with pytest.raises(ValueError):
        forward_with_peft(tiny_backbone, tiny_data.val, supernet, MixMode.soft())


def test_supernet_shape_mismatch(tiny_backbone):
    """Logit rows must match the sites."""
    sites = enumerate_sites(tiny_backbone, SpaceConfig())
    with pytest.raises(ValueError):
        SupernetState(
            sites,
            ArchWeights.zeros(len(sites) - 1, 3),
            SelectionState.initial([False] * len(sites), Z=1),
        )


def test_theta_gradient_fd(tiny_backbone, tiny_data):
    """Keep-logit gradients of the soft supernet agree with finite differences."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig(kinds=("LoRA", "BitFit")))
    randomize_weights(supernet, seed=5)
    batch = tiny_data.val.subset(np.arange(4))
    loss, _ = forward_with_peft(
        tiny_backbone, batch, supernet, MixMode.soft(), grad={"theta", "phi"}
    )
    assert ad.finite_diff_check(loss.graph, "arch.theta") <= 1e-4


def test_gradient_names(tiny_backbone, tiny_data, rng):
    """Gradients come back under the optimizer names."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig())
    loss, _ = forward_with_peft(
        tiny_backbone,
        tiny_data.val,
        supernet,
        MixMode.gumbel_hard(),
        rng=rng,
        grad={"weights", "theta", "phi"},
    )
    grads = ad.backward(loss.graph, loss)
    assert set(supernet.weight_params()) | {"arch.theta", "arch.phi"} == set(grads)
    assert grads["arch.theta"].shape == (supernet.num_sites, 2)


# MATERIALIZATION #


def test_materialize(tiny_backbone):
    """Keep logits that strictly win keep the site; ties drop it."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    supernet.arch.theta[0] = [0.0, 1.0]
    supernet.arch.phi[0] = [0.0, 2.0, 1.0]
    supernet.arch.theta[1] = [0.0, 1.0]
    supernet.arch.theta[2] = [0.0, 1.0]
    supernet.selection.remove([2])

    arch = materialize_architecture(supernet, budget=100.0, provenance={"seed": 0})
    assert [entry.kept for entry in arch.entries[:4]] == [True, True, False, False]
    assert arch.entries[0].dim == 4
    assert arch.entries[0].param_count == 64
    assert arch.entries[1].dim == 1  # uniform phi: smallest index
    assert arch.total_params == 64 + 16
    assert arch.budget == 100.0
    assert arch.provenance == {"seed": 0}


def test_materialize_fixed_dimension(tiny_backbone):
    """Fixed dimensions override the dimension logits."""
    supernet = SupernetState.build(tiny_backbone, SpaceConfig(kinds=("LoRA",)))
    supernet.arch.theta[0] = [0.0, 1.0]
    supernet.arch.phi[0] = [5.0, 0.0, 0.0]
    supernet.selection.d[0] = 1
    supernet.selection.k_star[0] = 2
    assert materialize_architecture(supernet).entries[0].dim == 8


def test_joint_materialization(tiny_backbone):
    """Joint logits materialize to the joint argmax, ties going to off."""
    supernet = SupernetState.build(
        tiny_backbone, SpaceConfig(kinds=("LoRA",)), entangled=True
    )
    supernet.joint[0] = [0.0, 2.0, 1.0, 0.0]
    supernet.joint[1] = [3.0, 1.0, 1.0, 1.0]
    supernet.joint[2] = [1.0, 1.0, 0.0, 0.0]
    supernet.joint[3] = [0.0, 0.0, 0.0, 4.0]
    entries = materialize_architecture(supernet).entries
    assert (entries[0].kept, entries[0].dim) == (True, 1)
    assert not entries[1].kept
    assert not entries[2].kept
    assert (entries[3].kept, entries[3].dim) == (True, 8)

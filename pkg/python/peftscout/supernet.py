"""The PEFT search space: module sites with keep gates and rank choices.

Every site pairs a PEFT kind with a backbone position. Rank-parameterized kinds
(LoRA, AdapterLR) hold one weight block sized for the largest candidate rank;
smaller ranks use its leading slices. Dimension-free kinds (BitFit, LNFit) are born
with a fixed dimension.
"""

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import LINEAR_KINDS, POSITION_KINDS, Backbone, Position
from .data_io.tasks import Batch
from .search_utils import hard_one_hot, row_softmax, sample_gumbel
from .selector import (
    ArchitectureEntry,
    SearchedArchitecture,
    SelectionState,
    expected_parameters,
    joint_expected_parameters,
)

PEFT_KINDS = ("LoRA", "AdapterLR", "BitFit", "LNFit")
RANK_KINDS = ("LoRA", "AdapterLR")
DEFAULT_DIMS = (1, 4, 8)

ADMISSIBLE_POSITIONS = {
    "LoRA": LINEAR_KINDS,
    "AdapterLR": ("O", "W2"),
    "BitFit": POSITION_KINDS,
    "LNFit": ("LN",),
}

GRAD_TARGETS = frozenset({"weights", "theta", "phi", "joint"})


@dataclass(frozen=True)
class SpaceConfig:
    """Which PEFT kinds are searched, where they attach and with which ranks.

    :param kinds: Enabled PEFT kinds.
    :param dims: Candidate dimensions, strictly increasing.
    :param placement: Optional override of the position kinds per PEFT kind. Every
        entry must be admissible for its PEFT kind.
    :param adapter_nonlinearity: Apply a GELU inside the AdapterLR bottleneck.

    :raises ValueError: Unknown kinds, invalid dimensions or inadmissible placement.
    """

    kinds: Tuple[str, ...] = PEFT_KINDS
    dims: Tuple[int, ...] = DEFAULT_DIMS
    placement: Optional[Dict[str, Tuple[str, ...]]] = None
    adapter_nonlinearity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

        for kind in self.kinds:
            if kind not in PEFT_KINDS:
                raise ValueError(f"Unknown PEFT kind {kind!r}, must be one of {PEFT_KINDS}.")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("PEFT kinds must not repeat.")
        if not self.dims or self.dims[0] < 1 or any(
            a >= b for a, b in zip(self.dims, self.dims[1:])  # noqa: B905
        ):
            raise ValueError(
                f"Candidate dimensions must be positive and strictly increasing, got {self.dims}."
            )

        if self.placement is not None:
            placement = {}
            for kind, positions in self.placement.items():
                if kind not in self.kinds:
                    raise ValueError(f"Placement given for disabled PEFT kind {kind!r}.")
                positions = tuple(positions)
                for pos in positions:
                    if pos not in ADMISSIBLE_POSITIONS[kind]:
                        raise ValueError(
                            f"{kind} cannot attach to {pos} positions, admissible are "
                            f"{ADMISSIBLE_POSITIONS[kind]}."
                        )
                placement[kind] = positions
            object.__setattr__(self, "placement", placement)

    def positions_for(self, kind: str) -> Tuple[str, ...]:
        """Position kinds a PEFT kind attaches to."""
        if self.placement is not None and kind in self.placement:
            return self.placement[kind]
        return ADMISSIBLE_POSITIONS[kind]

    def to_dict(self) -> dict:
        """Return the space as plain dictionary."""
        ret = asdict(self)
        ret["kinds"] = list(self.kinds)
        ret["dims"] = list(self.dims)
        if self.placement is not None:
            ret["placement"] = {k: list(v) for k, v in sorted(self.placement.items())}
        return ret


def param_count(kind: str, position: Position, dim: int) -> int:
    """Number of trainable parameters of a PEFT module.

    :param kind: PEFT kind.
    :param position: Backbone position the module attaches to.
    :param dim: Rank of the module (ignored by dimension-free kinds).

    :return: Parameter count.

    :raises ValueError: Unknown kind.

    Example:
        >>> param_count("LoRA", Position(0, "Q", 32, 32), 4)
        256
    """
    if kind == "LoRA":
        return dim * (position.d_in + position.d_out)
    if kind == "AdapterLR":
        return 2 * position.d_out * dim
    if kind in ("BitFit", "LNFit"):
        return position.d_out
    raise ValueError(f"Unknown PEFT kind {kind!r}.")


def init_site_weights(
    kind: str, position: Position, max_dim: int, rng: np.random.Generator
) -> Dict[str, np.ndarray]:
    """Zero-initialized PEFT weights sized for the largest rank.

    The PEFT function starts as the identity: LoRA ``B``, the adapter up-projection,
    BitFit biases and LNFit scale deltas are zero.
    """
    if kind == "LoRA":
        return {
            "A": rng.normal(0.0, 1.0 / np.sqrt(position.d_in), size=(position.d_in, max_dim)),
            "B": np.zeros((max_dim, position.d_out)),
        }
    if kind == "AdapterLR":
        return {
            "down": rng.normal(
                0.0, 1.0 / np.sqrt(position.d_out), size=(position.d_out, max_dim)
            ),
            "up": np.zeros((max_dim, position.d_out)),
        }
    if kind == "BitFit":
        return {"bias": np.zeros(position.d_out)}
    if kind == "LNFit":
        return {"scale": np.zeros(position.d_out)}
    raise ValueError(f"Unknown PEFT kind {kind!r}.")


@dataclass
class ModuleSite:
    """One candidate PEFT module of the search space.

    :param index: Index of the site in the space.
    :param kind: PEFT kind.
    :param position: Backbone position.
    :param dims: Candidate dimensions.
    :param q: Parameter count per candidate dimension.
    :param weights: Entangled weights, sized for the largest dimension.
    """

    index: int
    kind: str
    position: Position
    dims: Tuple[int, ...]
    q: np.ndarray
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def name(self) -> str:
        """Unique site name, e.g. ``layer0.Q.LoRA``."""
        return f"{self.position.name}.{self.kind}"

    @property
    def rank_parameterized(self) -> bool:
        """Does the dimension choice change the module?"""
        return self.kind in RANK_KINDS

    def weight_name(self, key: str) -> str:
        """Graph / optimizer name of one of the site's weights."""
        return f"{self.name}.{key}"

    def slice_index(self, key: str, dim: int) -> Tuple[slice, ...]:
        """Index of the leading slice of a weight that belongs to rank ``dim``."""
        if not self.rank_parameterized:
            return (slice(None),)
        if key in ("A", "down"):
            return (slice(None), slice(0, dim))
        return (slice(0, dim), slice(None))

    def active_weights(self, dim: Optional[int] = None) -> Dict[str, np.ndarray]:
        """Weights used at rank ``dim``; the full blocks if ``dim`` is None."""
        if dim is None:
            return dict(self.weights)
        return {key: arr[self.slice_index(key, dim)] for key, arr in self.weights.items()}


def module_forward(
    site: ModuleSite,
    weights: Dict[str, ad.Tensor],
    dim: int,
    x: ad.Tensor,
    out: ad.Tensor,
    nonlinearity: bool = False,
) -> ad.Tensor:
    """Output delta of a single PEFT module at rank ``dim``.

    :param site: Module site.
    :param weights: Graph tensors of the site's full weight blocks.
    :param dim: Rank to use.
    :param x: Input of the wrapped operation (normalized input for LN positions).
    :param out: Output of the wrapped operation.
    :param nonlinearity: GELU inside the adapter bottleneck.

    :return: Delta, same shape as ``out``.
    """
    if site.kind == "LoRA":
        a = ad.getitem(weights["A"], site.slice_index("A", dim))
        b = ad.getitem(weights["B"], site.slice_index("B", dim))
        return ad.matmul(ad.matmul(x, a), b)
    if site.kind == "AdapterLR":
        down = ad.getitem(weights["down"], site.slice_index("down", dim))
        up = ad.getitem(weights["up"], site.slice_index("up", dim))
        hidden = ad.matmul(out, down)
        if nonlinearity:
            hidden = ad.gelu(hidden)
        return ad.matmul(hidden, up)
    if site.kind == "BitFit":
        return ad.add(out.graph.constant(np.zeros(out.shape)), weights["bias"])
    if site.kind == "LNFit":
        return ad.mul(x, weights["scale"])
    raise ValueError(f"Unknown PEFT kind {site.kind!r}.")


def enumerate_sites(backbone: Backbone, space: SpaceConfig, seed: int = 0) -> List[ModuleSite]:
    """Build the ordered list of module sites of a search space.

    Sites are grouped by PEFT kind (in the order of ``space.kinds``) and follow the
    backbone catalog within a kind.

    :param backbone: Backbone providing the position catalog.
    :param space: Search space configuration.
    :param seed: Seed for the random parts of the PEFT weight initialization.

    :return: List of sites.

    :raises ValueError: A placement names a position kind that is not admissible.
    """
    rng = np.random.default_rng(seed)
    sites = []
    for kind in space.kinds:
        allowed = space.positions_for(kind)
        for pos_kind in allowed:
            if pos_kind not in ADMISSIBLE_POSITIONS[kind]:
                raise ValueError(f"{kind} cannot attach to {pos_kind} positions.")
        for position in backbone.catalog:
            if position.kind not in allowed:
                continue
            q = np.array([param_count(kind, position, d) for d in space.dims], dtype=np.int64)
            sites.append(
                ModuleSite(
                    index=len(sites),
                    kind=kind,
                    position=position,
                    dims=space.dims,
                    q=q,
                    weights=init_site_weights(kind, position, max(space.dims), rng),
                )
            )
    return sites


@dataclass
class ArchWeights:
    """Architecture logits.

    :param theta: Keep / drop logits, shape (N, 2), column 1 = keep.
    :param phi: Dimension logits, shape (N, K).

    :raises ValueError: Shapes do not match.
    """

    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1, 2)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2 or len(self.phi) != len(self.theta):
            raise ValueError(
                f"theta {self.theta.shape} and phi {self.phi.shape} must have N rows each."
            )

    @classmethod
    def zeros(cls, num_sites: int, num_dims: int) -> "ArchWeights":
        """Uniform architecture logits."""
        return cls(np.zeros((num_sites, 2)), np.zeros((num_sites, num_dims)))


@dataclass(frozen=True)
class MixMode:
    """How sites are mixed into the forward pass.

    ``soft``: softmax probabilities (optionally of Gumbel-perturbed logits).
    ``gumbel_hard``: one-hot Gumbel samples with straight-through gradients.
    ``discrete``: fixed keep vector and dimensions; logits are ignored.
    """

    kind: str
    gumbel: bool = False
    keep: Optional[Tuple[int, ...]] = None
    dims: Optional[Tuple[Optional[int], ...]] = None

    def __post_init__(self):
        if self.kind not in ("soft", "gumbel_hard", "discrete"):
            raise ValueError(f"Unknown mix mode {self.kind!r}.")
        if self.kind == "discrete":
            if self.keep is None or self.dims is None or len(self.keep) != len(self.dims):
                raise ValueError("Discrete mode needs keep and dims of equal length.")

    @classmethod
    def soft(cls, gumbel: bool = False) -> "MixMode":
        """Soft mixture, with Gumbel noise if requested."""
        return cls("soft", gumbel=gumbel)

    @classmethod
    def gumbel_hard(cls) -> "MixMode":
        """Hard straight-through Gumbel samples."""
        return cls("gumbel_hard", gumbel=True)

    @classmethod
    def discrete(
        cls, keep: Sequence[int], dims: Sequence[Optional[int]]
    ) -> "MixMode":
        """Fixed architecture."""
        return cls(
            "discrete",
            keep=tuple(int(k) for k in keep),
            dims=tuple(None if d is None else int(d) for d in dims),
        )


class SupernetState:
    """Sites, architecture logits and selection state of a running search.

    In entangled mode a joint ``(N, K + 1)`` logit matrix (column 0 = off) replaces
    the separate keep and dimension logits during mixing.
    """

    def __init__(
        self,
        sites: List[ModuleSite],
        arch: ArchWeights,
        selection: SelectionState,
        dims: Tuple[int, ...] = DEFAULT_DIMS,
        gumbel_temperature: float = 1.0,
        adapter_nonlinearity: bool = False,
        joint: Optional[np.ndarray] = None,
    ) -> None:
        """Initialize the supernet.

        :raises ValueError: Row counts differ from the number of sites or the
            temperature is not positive.
        """
        n = len(sites)
        if len(arch.theta) != n or selection.num_sites != n:
            raise ValueError(
                f"{n} sites but {len(arch.theta)} logit rows and "
                f"{selection.num_sites} selection entries."
            )
        if arch.phi.shape[1] != len(dims):
            raise ValueError("phi must have one column per candidate dimension.")
        if gumbel_temperature <= 0:
            raise ValueError("The Gumbel temperature must be positive.")
        if joint is not None and joint.shape != (n, len(dims) + 1):
            raise ValueError(f"Joint logits must have shape {(n, len(dims) + 1)}.")

        self.sites = sites
        self.arch = arch
        self.selection = selection
        self.dims = tuple(dims)
        self.gumbel_temperature = gumbel_temperature
        self.adapter_nonlinearity = adapter_nonlinearity
        self.joint = joint

    @classmethod
    def build(
        cls,
        backbone: Backbone,
        space: SpaceConfig,
        Z: int = 1,
        seed: int = 0,
        gumbel_temperature: float = 1.0,
        entangled: bool = False,
    ) -> "SupernetState":
        """Create a fresh supernet with uniform logits over a search space."""
        sites = enumerate_sites(backbone, space, seed=seed)
        n, k = len(sites), len(space.dims)
        selection = SelectionState.initial([not s.rank_parameterized for s in sites], Z)
        return cls(
            sites,
            ArchWeights.zeros(n, k),
            selection,
            dims=space.dims,
            gumbel_temperature=gumbel_temperature,
            adapter_nonlinearity=space.adapter_nonlinearity,
            joint=np.zeros((n, k + 1)) if entangled else None,
        )

    # PROPERTIES #

    @property
    def num_sites(self) -> int:
        """Number of sites N."""
        return len(self.sites)

    @property
    def q(self) -> np.ndarray:
        """Parameter counts, shape (N, K)."""
        if not self.sites:
            return np.zeros((0, len(self.dims)), dtype=np.int64)
        return np.stack([site.q for site in self.sites])

    @property
    def max_space_params(self) -> int:
        """Parameters of the full space at the largest dimensions."""
        return int(self.q[:, -1].sum()) if self.sites else 0

    # METHODS #

    def weight_params(self) -> Dict[str, np.ndarray]:
        """All PEFT weights by graph name."""
        return {
            site.weight_name(key): arr
            for site in self.sites
            for key, arr in site.weights.items()
        }

    def load_weight_params(self, params: Dict[str, np.ndarray]) -> None:
        """Write updated PEFT weights back into the sites."""
        for site in self.sites:
            for key in site.weights:
                name = site.weight_name(key)
                if name in params:
                    site.weights[key] = params[name]

    def check_alignment(self, backbone: Backbone) -> None:
        """Make sure every site attaches to a position of the backbone's catalog.

        :raises ValueError: A site position is missing from or differs from the catalog.
        """
        catalog = {pos.name: pos for pos in backbone.catalog}
        for site in self.sites:
            if catalog.get(site.position.name) != site.position:
                raise ValueError(
                    f"Site {site.name} does not align with the backbone's position catalog."
                )

    def mixer(
        self,
        graph: ad.ComputeGraph,
        mode: MixMode,
        rng: Optional[np.random.Generator] = None,
        grad: Iterable[str] = (),
    ) -> "SiteMixer":
        """Hook that adds the mixed site deltas to the backbone forward pass."""
        return SiteMixer(self, graph, mode, rng=rng, grad=grad)

    def expected_parameters(self) -> float:
        """Expected trainable parameters under the current logits.

        In entangled mode the expectation is taken over the joint distribution.
        """
        if self.joint is not None:
            return joint_expected_parameters(self.joint, self.selection, self.q)
        return expected_parameters(self.arch.theta, self.arch.phi, self.selection, self.q)

    def materialization_logits(self) -> Tuple[np.ndarray, np.ndarray]:
        """Keep and dimension logits used to materialize an architecture.

        Joint logits are converted to ``theta = (log p_off, log max_k p_k)`` and
        ``phi = log p_1..K``, which reproduces the joint argmax (ties: off).
        """
        if self.joint is None:
            return self.arch.theta, self.arch.phi
        probs = np.maximum(row_softmax(self.joint), np.finfo(np.float64).tiny)
        logp = np.log(probs)
        theta = np.stack([logp[:, 0], logp[:, 1:].max(axis=1)], axis=1)
        return theta, logp[:, 1:]


class SiteMixer:
    """Backbone hook for one forward pass of the supernet.

    Weight and logit leaves are recorded on the graph under their optimizer names;
    ``grad`` selects which of them require a gradient (``weights``, ``theta``,
    ``phi``, ``joint``).
    """

    def __init__(
        self,
        supernet: SupernetState,
        graph: ad.ComputeGraph,
        mode: MixMode,
        rng: Optional[np.random.Generator] = None,
        grad: Iterable[str] = (),
    ) -> None:
        """Record the relaxed architecture probabilities on the graph.

        :raises ValueError: Unknown gradient targets, Gumbel sampling without a random
            generator, or discrete vectors of the wrong length.
        """
        self.supernet = supernet
        self.graph = graph
        self.mode = mode
        self.grad: FrozenSet[str] = frozenset(grad)
        if not self.grad <= GRAD_TARGETS:
            raise ValueError(f"Unknown gradient targets {sorted(self.grad - GRAD_TARGETS)}.")
        if mode.gumbel and mode.kind != "discrete" and rng is None:
            raise ValueError("Gumbel sampling needs a random generator.")
        self.rng = rng

        self._weights: Dict[int, Dict[str, ad.Tensor]] = {}
        self._by_position: Dict[str, List[int]] = defaultdict(list)

        sel = supernet.selection
        if mode.kind == "discrete":
            if len(mode.keep) != supernet.num_sites:
                raise ValueError(
                    f"Discrete mode describes {len(mode.keep)} sites, the space has "
                    f"{supernet.num_sites}."
                )
            active = [bool(k) for k in mode.keep]
        else:
            active = [bool(b) for b in sel.b]
        for n, site in enumerate(supernet.sites):
            if active[n]:
                self._by_position[site.position.name].append(n)

        self.gates = self.dim_probs = self.joint_probs = None
        if mode.kind != "discrete" and supernet.num_sites > 0:
            if supernet.joint is not None:
                self.joint_probs = self._relaxed(supernet.joint, "arch.joint", "joint")
            else:
                self.gates = self._relaxed(supernet.arch.theta, "arch.theta", "theta")
                self.dim_probs = self._relaxed(supernet.arch.phi, "arch.phi", "phi")

    def _relaxed(self, logits: np.ndarray, name: str, target: str) -> ad.Tensor:
        """Softmax (Gumbel-perturbed, tempered, possibly hard) of logit rows."""
        leaf = self.graph.leaf(logits, name=name, requires_grad=target in self.grad)
        if self.mode.gumbel:
            leaf = ad.add(leaf, self.graph.constant(sample_gumbel(self.rng, logits.shape)))
        probs = ad.softmax(ad.scale(leaf, 1.0 / self.supernet.gumbel_temperature))
        if self.mode.kind == "gumbel_hard":
            probs = ad.straight_through(probs, hard_one_hot(probs.values))
        return probs

    def site_weights(self, n: int) -> Dict[str, ad.Tensor]:
        """Graph leaves of a site's weights (recorded on first use)."""
        if n not in self._weights:
            site = self.supernet.sites[n]
            self._weights[n] = {
                key: self.graph.leaf(
                    arr, name=site.weight_name(key), requires_grad="weights" in self.grad
                )
                for key, arr in site.weights.items()
            }
        return self._weights[n]

    def __call__(self, position: Position, x: ad.Tensor, out: ad.Tensor) -> ad.Tensor:
        ret = out
        for n in self._by_position.get(position.name, ()):
            delta = self.site_delta(n, x, out)
            if delta is not None:
                ret = ad.add(ret, delta)
        return ret

    def _single(self, n: int, dim: int, x: ad.Tensor, out: ad.Tensor) -> ad.Tensor:
        site = self.supernet.sites[n]
        return module_forward(
            site, self.site_weights(n), dim, x, out, self.supernet.adapter_nonlinearity
        )

    def _weighted_sum(
        self, n: int, probs: ad.Tensor, offset: int, x: ad.Tensor, out: ad.Tensor,
        target: str,
    ) -> Optional[ad.Tensor]:
        """Sum over candidate ranks weighted by ``probs[n, offset + k]``."""
        acc = None
        for k, dim in enumerate(self.supernet.dims):
            if probs.values[n, offset + k] == 0.0 and target not in self.grad:
                continue
            term = ad.mul(self._single(n, dim, x, out), ad.getitem(probs, (n, offset + k)))
            acc = term if acc is None else ad.add(acc, term)
        return acc

    def site_delta(self, n: int, x: ad.Tensor, out: ad.Tensor) -> Optional[ad.Tensor]:
        """Mixed delta of site ``n``; None if it contributes exactly nothing.

        :raises ValueError: Discrete mode with a kept site lacking a valid dimension.
        """
        site = self.supernet.sites[n]
        sel = self.supernet.selection

        if self.mode.kind == "discrete":
            dim = self.mode.dims[n]
            if dim is None or dim not in site.dims:
                raise ValueError(
                    f"Site {site.name} is kept but its dimension {dim} is undetermined "
                    f"or not one of {site.dims}."
                )
            return self._single(n, dim, x, out)

        if self.joint_probs is not None:
            return self._weighted_sum(n, self.joint_probs, 1, x, out, "joint")

        if sel.b[n] == 0:
            return None
        if self.gates.values[n, 1] == 0.0 and "theta" not in self.grad:
            return None
        gate = ad.getitem(self.gates, (n, 1))
        if sel.d[n] == 1:
            mixture = self._single(n, site.dims[sel.k_star[n]], x, out)
        else:
            mixture = self._weighted_sum(n, self.dim_probs, 0, x, out, "phi")
        if mixture is None:
            return None
        return ad.mul(mixture, gate)


def mix_site_output(
    site: ModuleSite,
    arch: ArchWeights,
    selection: SelectionState,
    x: ad.Tensor,
    mode: MixMode,
    rng: Optional[np.random.Generator] = None,
    out: Optional[ad.Tensor] = None,
    temperature: float = 1.0,
    grad: Iterable[str] = (),
) -> ad.Tensor:
    """Mixed output delta of a single site, recorded on the graph of ``x``.

    :param site: Module site; ``site.index`` selects its rows of ``arch`` and
        ``selection`` (and of discrete mode vectors).
    :param arch: Architecture logits of the whole space.
    :param selection: Selection state of the whole space.
    :param x: Input of the wrapped operation.
    :param mode: Mixing mode.
    :param rng: Random generator for Gumbel noise.
    :param out: Output of the wrapped operation; zeros if not given (AdapterLR needs it).
    :param temperature: Gumbel-Softmax temperature.
    :param grad: Gradient targets, see :class:`SiteMixer`.

    :return: Delta tensor of the output shape; exact zeros for removed sites.

    :raises ValueError: Input width does not match the position, or an AdapterLR site
        without ``out``.
    """
    n = site.index
    if x.shape[-1] != site.position.d_in:
        raise ValueError(
            f"Input width {x.shape[-1]} does not match {site.position.name} "
            f"({site.position.d_in})."
        )
    graph = x.graph
    if out is None:
        if site.kind == "AdapterLR":
            raise ValueError("AdapterLR sites need the output of the wrapped operation.")
        out = graph.constant(np.zeros(x.shape[:-1] + (site.position.d_out,)))

    sub_selection = SelectionState(
        b=selection.b[[n]].copy(),
        d=selection.d[[n]].copy(),
        k_star=selection.k_star[[n]].copy(),
    )
    if mode.kind == "discrete":
        mode = MixMode.discrete((mode.keep[n],), (mode.dims[n],))
    supernet = SupernetState(
        [site],
        ArchWeights(arch.theta[[n]], arch.phi[[n]]),
        sub_selection,
        dims=site.dims,
        gumbel_temperature=temperature,
    )
    mixer = SiteMixer(supernet, graph, mode, rng=rng, grad=grad)
    active = mode.keep[0] if mode.kind == "discrete" else sub_selection.b[0]
    delta = mixer.site_delta(0, x, out) if active else None
    if delta is None:
        return graph.constant(np.zeros(out.shape))
    return delta


def forward_with_peft(
    backbone: Backbone,
    batch: Batch,
    supernet: SupernetState,
    mode: MixMode,
    rng: Optional[np.random.Generator] = None,
    grad: Iterable[str] = (),
) -> Tuple[ad.Tensor, ad.Tensor]:
    """Run the frozen backbone with the supernet's PEFT modules mixed in.

    :param backbone: Frozen backbone.
    :param batch: Batch to evaluate.
    :param supernet: Supernet state.
    :param mode: Mixing mode.
    :param rng: Random generator for Gumbel noise.
    :param grad: Gradient targets, see :class:`SiteMixer`.

    :return: Mean cross-entropy loss and logits, on a fresh graph.

    :raises ValueError: Sites that do not align with the backbone's catalog.
    """
    supernet.check_alignment(backbone)
    graph = ad.ComputeGraph()
    mixer = supernet.mixer(graph, mode, rng=rng, grad=grad)
    logits = backbone.encode(graph, batch.tokens, hook=mixer)
    return ad.cross_entropy(logits, batch.labels), logits


def materialize_architecture(
    supernet: SupernetState,
    budget: Optional[float] = None,
    provenance: Optional[Dict[str, object]] = None,
) -> SearchedArchitecture:
    """Turn the architecture logits and selection state into a discrete architecture.

    A site is kept if it was never removed and its keep logit strictly wins; the
    dimension is the fixed one or the argmax of the dimension row (ties: smaller index).

    :param supernet: Supernet state.
    :param budget: Budget the search aimed at (recorded only).
    :param provenance: Config hash, seed and mode (recorded only).

    :return: Searched architecture.
    """
    theta, phi = supernet.materialization_logits()
    sel = supernet.selection
    entries = []
    for n, site in enumerate(supernet.sites):
        kept = bool(sel.b[n] == 1 and np.argmax(theta[n]) == 1)
        if kept:
            k = sel.k_star[n] if sel.d[n] == 1 else int(np.argmax(row_softmax(phi[[n]])[0]))
            dim = site.dims[k]
            count = param_count(site.kind, site.position, dim)
        else:
            dim, count = 0, 0
        entries.append(
            ArchitectureEntry(
                name=site.name,
                kind=site.kind,
                position=site.position.name,
                kept=kept,
                dim=int(dim),
                param_count=int(count),
            )
        )
    return SearchedArchitecture(
        entries=tuple(entries),
        dims=supernet.dims,
        budget=None if budget is None else float(budget),
        provenance=dict(provenance or {}),
    )

"""Budget-guided search of a PEFT architecture, and re-training of the result.

Computationally expensive routines are sourced out into search_utils.py for jitting.
"""

from dataclasses import asdict, dataclass, field, replace
import logging
import math
import time
from typing import Dict, List, Optional, Sequence, Tuple
import warnings

import numpy as np

import peftscout
from . import autodiff as ad
from .backbone import Backbone
from .data_io.tasks import Batch, SplitData, iterate_batches
from .search_utils import AdamW, ascending_order, row_softmax
from .selector import (
    SearchedArchitecture,
    SelectionState,
    dim_fix_count,
    expected_parameters,
    expected_site_counts,
    fix_dimensions,
    potential_dims,
    reduction_target,
    select_modules_to_remove,
    site_counts,
)
from .sensitivity import (
    IndicatorHistory,
    SensitivityState,
    ema_update,
    importance_indicator,
    module_sensitivity,
    stability_and_trigger,
)
from .supernet import (
    PEFT_KINDS,
    ArchWeights,
    MixMode,
    SpaceConfig,
    SupernetState,
    enumerate_sites,
    forward_with_peft,
    materialize_architecture,
    param_count,
)

logger = logging.getLogger(__name__)

SEARCH_MODES = (
    "iterative",
    "entangled",
    "binary-then-dim",
    "dim-then-binary",
    "no-selection",
)
ABLATION_MODES = ("entangled", "binary-then-dim", "dim-then-binary")


@dataclass(frozen=True)
class BudgetConfig:
    """Budget and hyperparameters of a search.

    :param budget_ratio: Budget as fraction of the backbone parameters.
    :param Z: Maximum number of selection triggers.
    :param tau: Stability threshold of the trigger.
    :param H: Number of consecutive indicator pairs the stability averages over.
    :param gamma: Smoothing factor of the sensitivity average.
    :param T: Maximum number of search steps.
    :param lr_weights: Learning rate of the PEFT weights.
    :param lr_arch: Learning rate of the architecture logits.
    :param seed: Seed of everything random in the search.
    :param mode: Search mode, one of ``SEARCH_MODES``.
    :param batch_size: Rows per batch.
    :param weight_decay: Decoupled weight decay of the PEFT weights.
    :param gumbel_temperature: Initial Gumbel-Softmax temperature.
    :param gumbel_anneal_to: Final temperature of a linear anneal over ``T``, if any.
    :param project_to_budget: After the search, drop the least sensitive kept sites
        until the architecture fits the budget.

    :raises ValueError: Values out of range.
    """

    budget_ratio: float = 0.05
    Z: int = 100
    tau: float = 0.85
    H: int = 5
    gamma: float = 0.85
    T: int = 2000
    lr_weights: float = 3e-4
    lr_arch: float = 1e-2
    seed: int = 0
    mode: str = "iterative"
    batch_size: int = 32
    weight_decay: float = 0.01
    gumbel_temperature: float = 1.0
    gumbel_anneal_to: Optional[float] = None
    project_to_budget: bool = True

    def __post_init__(self):
        if not 0.0 < self.budget_ratio < 1.0:
            raise ValueError(f"budget_ratio must lie in (0, 1), got {self.budget_ratio}.")
        if self.Z < 1 or self.H < 1 or self.T < 0 or self.batch_size < 1:
            raise ValueError("Z, H and batch_size must be >= 1 and T >= 0.")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}.")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}.")
        if self.lr_weights < 0 or self.lr_arch < 0 or self.weight_decay < 0:
            raise ValueError("Learning rates and weight decay must be >= 0.")
        if self.gumbel_temperature <= 0 or (
            self.gumbel_anneal_to is not None and self.gumbel_anneal_to <= 0
        ):
            raise ValueError("Gumbel temperatures must be positive.")
        if self.mode not in SEARCH_MODES:
            raise ValueError(f"Unknown search mode {self.mode!r}, must be one of {SEARCH_MODES}.")

    def to_dict(self) -> dict:
        """Return the configuration as plain dictionary."""
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    """Per-step record of the search trace.

    ``expected_params`` is taken over the joint distribution in entangled mode.
    """

    step: int
    train_loss: float
    val_loss: float
    beta: float
    expected_params: float


@dataclass(frozen=True)
class TriggerRecord:
    """Per-trigger record: reduction target, removed and fixed sites."""

    z: int
    step: int
    reduction: float
    removed: Tuple[int, ...]
    fix_count: int
    fixed: Tuple[int, ...]


@dataclass
class SearchTrace:
    """Everything the search did, for export and plotting."""

    steps: List[StepRecord] = field(default_factory=list)
    triggers: List[TriggerRecord] = field(default_factory=list)
    projection_removed: List[int] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    budget: float = 0.0
    search_seconds: float = 0.0


@dataclass(frozen=True)
class SearchPhase:
    """A stretch of the search with its own trigger budget.

    :param steps: Maximum number of steps.
    :param triggers: Trigger budget; 0 disables selection.
    :param binary: Train keep logits and allow removals.
    :param dimension: Train dimension logits and allow dimension fixing.
    """

    steps: int
    triggers: int
    binary: bool = True
    dimension: bool = True


@dataclass
class StepStats:
    """Losses and gradients harvested during one bilevel step."""

    train_loss: float
    val_loss: float
    grads_train: Dict[str, np.ndarray]
    grads_val: Dict[str, np.ndarray]


@dataclass(frozen=True)
class EvalMetrics:
    """Validation and test metrics of a re-trained architecture."""

    val_loss: float
    val_accuracy: float
    test_loss: float
    test_accuracy: float
    trainable_params: int
    steps: int
    seconds: float = 0.0

    def to_dict(self) -> dict:
        """Return the metrics as plain dictionary, without the wall-clock time."""
        ret = asdict(self)
        del ret["seconds"]
        return ret


class PEFTSearchProcessor:
    """Run the bilevel search with early selection on a frozen backbone.

    Example:
        >>> proc = PEFTSearchProcessor(backbone, SpaceConfig(), data, BudgetConfig(T=100))
        >>> arch, trace = proc.search()
        >>> arch.total_params <= proc.budget
        True
    """

    def __init__(
        self,
        backbone: Backbone,
        space: SpaceConfig,
        data: SplitData,
        config: BudgetConfig,
        provenance: Optional[Dict[str, object]] = None,
    ) -> None:
        """Initialize the supernet, optimizers and batch streams.

        :param backbone: Frozen backbone.
        :param space: Search space.
        :param data: Split data; only the two training halves are used.
        :param config: Budget configuration.
        :param provenance: Config hash etc., recorded in the architecture.

        :raises ValueError: The backbone is not frozen.
        """
        if not backbone.frozen:
            raise ValueError("The backbone must be pretrained and frozen before a search.")
        self.backbone = backbone
        self.space = space
        self.data = data
        self.config = config

        seed = config.seed
        self.supernet = SupernetState.build(
            backbone,
            space,
            Z=config.Z,
            seed=seed,
            gumbel_temperature=config.gumbel_temperature,
            entangled=config.mode == "entangled",
        )
        self.budget = config.budget_ratio * backbone.param_count
        self.provenance = {"seed": seed, "mode": config.mode}
        self.provenance.update(provenance or {})

        n = self.supernet.num_sites
        self.sensitivity = SensitivityState.empty(n, config.gamma)
        self.history = IndicatorHistory(config.H)
        self.trace = SearchTrace(budget=self.budget)

        self._rng = np.random.default_rng([seed, 0])
        self._weight_batches = iterate_batches(
            data.weight_train, config.batch_size, np.random.default_rng([seed, 1])
        )
        self._arch_batches = iterate_batches(
            data.arch_train, config.batch_size, np.random.default_rng([seed, 2])
        )

        total = max(config.T, 1)
        self._opt_weights = AdamW(config.lr_weights, total, config.weight_decay)
        self._opt_theta = AdamW(config.lr_arch, total)
        self._opt_phi = AdamW(config.lr_arch, total)

        self.step_count = 0
        self._phase = SearchPhase(config.T, config.Z)
        self._z_offset = 0

    # PROPERTIES #

    @property
    def selection(self) -> SelectionState:
        """Selection state of the supernet."""
        return self.supernet.selection

    @property
    def triggers_enabled(self) -> bool:
        """Can the current phase still fire a trigger?"""
        return self._phase.triggers > 0 and self.selection.z < self.selection.Z

    # METHODS #

    def bilevel_step(
        self, weight_batch: Batch, arch_batch: Batch, phi_batch: Optional[Batch] = None
    ) -> StepStats:
        """One update of the PEFT weights, then the keep logits, then the dimensions.

        :param weight_batch: Batch from the weight-training split.
        :param arch_batch: Batch from the architecture-training split.
        :param phi_batch: Fresh architecture batch for the dimension step; defaults
            to ``arch_batch``.

        :return: Losses and the gradients harvested for the sensitivity scores.
        """
        sn = self.supernet
        sel = sn.selection
        phi_batch = arch_batch if phi_batch is None else phi_batch

        # PEFT weights on a soft Gumbel sample
        loss_w, _ = forward_with_peft(
            self.backbone, weight_batch, sn, MixMode.soft(gumbel=True), self._rng,
            grad={"weights"},
        )
        grads_train = ad.backward(loss_w.graph, loss_w)
        params = sn.weight_params()
        self._opt_weights.step(params, {k: v for k, v in grads_train.items() if k in params})
        sn.load_weight_params(params)

        # keep logits (or joint logits) with the dimensions held fixed
        if sn.joint is not None:
            targets = {"weights", "joint"}
        else:
            targets = {"weights", "theta"} if self._phase.binary else {"weights"}
        loss_a, _ = forward_with_peft(
            self.backbone, arch_batch, sn, MixMode.gumbel_hard(), self._rng, grad=targets
        )
        grads_val = ad.backward(loss_a.graph, loss_a)
        if sn.joint is not None:
            joint = {"arch.joint": sn.joint}
            self._opt_theta.step(joint, {"arch.joint": grads_val["arch.joint"]})
            sn.joint = joint["arch.joint"]
        elif self._phase.binary:
            theta = {"arch.theta": sn.arch.theta}
            self._opt_theta.step(
                theta,
                {"arch.theta": grads_val["arch.theta"]},
                frozen_rows={"arch.theta": sel.theta_frozen},
            )
            sn.arch.theta = theta["arch.theta"]

        # dimension logits with the keep logits held fixed
        if sn.joint is None and self._phase.dimension and not np.all(sel.phi_frozen):
            loss_p, _ = forward_with_peft(
                self.backbone, phi_batch, sn, MixMode.gumbel_hard(), self._rng, grad={"phi"}
            )
            grads_phi = ad.backward(loss_p.graph, loss_p)
            phi = {"arch.phi": sn.arch.phi}
            self._opt_phi.step(
                phi,
                {"arch.phi": grads_phi["arch.phi"]},
                frozen_rows={"arch.phi": sel.phi_frozen},
            )
            sn.arch.phi = phi["arch.phi"]

        return StepStats(float(loss_w.values), float(loss_a.values), grads_train, grads_val)

    def site_vectors(
        self, grads: Optional[Dict[str, np.ndarray]] = None
    ) -> List[Optional[List[np.ndarray]]]:
        """Active weights (or their gradients) of every kept site.

        The active weights are the full blocks while the dimension is searched and the
        leading slice of the fixed dimension afterwards.

        :param grads: Gradients by weight name; missing ones count as zero. If None,
            the weights themselves are returned.

        :return: Per site, a list of arrays; None for removed sites.
        """
        sel = self.selection
        ret = []
        for n, site in enumerate(self.supernet.sites):
            if sel.b[n] == 0:
                ret.append(None)
                continue
            dim = site.dims[sel.k_star[n]] if sel.d[n] == 1 else None
            arrays = []
            for key, weight in site.weights.items():
                arr = weight
                if grads is not None:
                    arr = grads.get(site.weight_name(key))
                    if arr is None:
                        arr = np.zeros_like(weight)
                arrays.append(arr if dim is None else arr[site.slice_index(key, dim)])
            ret.append(arrays)
        return ret

    def step(self) -> StepRecord:
        """Run one search step and, if the trigger fires, one selection round.

        :return: Record of the step.
        """
        cfg = self.config
        sn = self.supernet
        sel = sn.selection
        t = self.step_count

        if cfg.gumbel_anneal_to is not None and cfg.T > 0:
            frac = min(t / cfg.T, 1.0)
            sn.gumbel_temperature = cfg.gumbel_temperature + frac * (
                cfg.gumbel_anneal_to - cfg.gumbel_temperature
            )

        stats = self.bilevel_step(
            next(self._weight_batches), next(self._arch_batches), next(self._arch_batches)
        )

        with warnings.catch_warnings():
            if peftscout.VERBOSITY < 2:
                warnings.simplefilter("ignore", category=RuntimeWarning)
            raw = module_sensitivity(
                self.site_vectors(stats.grads_train),
                self.site_vectors(stats.grads_val),
                self.site_vectors(),
                keep=sel.b,
            )
        ema_update(self.sensitivity, raw)

        _, phi = sn.materialization_logits()
        q = sn.q
        indicator = importance_indicator(
            self.sensitivity.s_bar, site_counts(phi, sel, q), sel.b, self.budget
        )
        self.history.push(indicator)
        beta, fire = stability_and_trigger(self.history, cfg.tau, t)
        if len(phi) and self.triggers_enabled and self._phase.dimension:
            sel.phi_window.push(row_softmax(phi))

        record = StepRecord(
            step=t,
            train_loss=stats.train_loss,
            val_loss=stats.val_loss,
            beta=beta,
            expected_params=sn.expected_parameters(),
        )
        self.trace.steps.append(record)
        self.step_count += 1

        if t % 100 == 0:
            logger.info(
                "step %d: train loss %.4f, E %.1f, beta %.3f",
                t,
                record.train_loss,
                record.expected_params,
                beta,
            )

        if fire and self.triggers_enabled:
            self.handle_trigger(t)
        return record

    def handle_trigger(self, step: int) -> TriggerRecord:
        """One round of early selection: remove modules, then fix dimensions.

        Removed sites freeze their keep and dimension logits, fixed sites their
        dimension logits. The indicator history starts over afterwards.

        :param step: Step at which the trigger fired.

        :return: Record of the trigger.
        """
        sn = self.supernet
        sel = sn.selection
        theta, phi = sn.arch.theta, sn.arch.phi
        q = sn.q

        E = expected_parameters(theta, phi, sel, q)
        R = reduction_target(E, self.budget, sel.Z, sel.z)
        before = sel.copy()

        removed: List[int] = []
        if self._phase.binary:
            counts = expected_site_counts(theta, phi, sel, q)
            select_modules_to_remove(self.sensitivity.s_bar, sel, counts, R)
            removed = [int(n) for n in np.flatnonzero(before.kept & ~sel.kept)]

        v_now = potential_dims(phi, sel, sn.dims)
        fix_count, fixed = 0, []
        if self._phase.dimension:
            v_prev = before.v_prev if before.v_prev is not None else v_now
            fix_count = dim_fix_count(before, v_prev, v_now, sel.Z, sel.z)
            lam = sel.phi_window.stability(sn.num_sites)
            lam[~sel.undetermined] = np.inf
            fixed = fix_dimensions(lam, fix_count, v_now, sel, sn.dims)

        record = TriggerRecord(
            z=self._z_offset + sel.z,
            step=step,
            reduction=float(R),
            removed=tuple(removed),
            fix_count=int(fix_count),
            fixed=tuple(fixed),
        )
        self.trace.triggers.append(record)

        sel.v_prev = v_now
        sel.z += 1
        self.history.clear()
        sel.phi_window.clear()
        if len(phi):
            sel.phi_window.push(row_softmax(phi))

        logger.info(
            "trigger %d at step %d: R %.1f, removed %d, fixed %d of %d",
            record.z,
            step,
            R,
            len(removed),
            len(fixed),
            fix_count,
        )
        return record

    def start_phase(self, phase: SearchPhase) -> None:
        """Reset the trigger schedule for a new phase of the search."""
        sel = self.selection
        self._z_offset = len(self.trace.triggers)
        self._phase = phase
        sel.z = 0
        sel.Z = max(phase.triggers, 1)
        sel.v_prev = potential_dims(self.supernet.arch.phi, sel, self.supernet.dims)
        sel.phi_window.clear()
        self.history.clear()

    def run_phase(self, phase: SearchPhase) -> None:
        """Step until the phase's trigger budget or step budget is used up."""
        self.start_phase(phase)
        for _ in range(phase.steps):
            self.step()
            if phase.triggers > 0 and self.selection.z >= phase.triggers:
                break

    def project_to_budget(self) -> List[int]:
        """Drop the least sensitive kept sites until the architecture fits the budget.

        :return: Indices of the dropped sites, in the order they were dropped.
        """
        removed = []
        while True:
            arch = self.materialize()
            if arch.total_params <= self.budget:
                break
            kept = np.array([entry.kept for entry in arch.entries], dtype=bool)
            n = int(ascending_order(self.sensitivity.s_bar, kept)[0])
            self.selection.remove([n])
            removed.append(n)
        if removed:
            if peftscout.VERBOSITY >= 1:
                warnings.warn(
                    f"Architecture exceeded the budget, dropped {len(removed)} sites.",
                    UserWarning,
                    stacklevel=1,
                )
            self.trace.projection_removed.extend(removed)
        return removed

    def materialize(self) -> SearchedArchitecture:
        """Materialize the current supernet."""
        return materialize_architecture(self.supernet, self.budget, self.provenance)

    def search(
        self, phases: Optional[Sequence[SearchPhase]] = None
    ) -> Tuple[SearchedArchitecture, SearchTrace]:
        """Run the search and materialize the result.

        If the budget covers the whole space at the largest dimensions, no search is
        needed: the full space is returned and a warning recorded.

        :param phases: Phases to run; by default one phase with ``T`` steps and ``Z``
            triggers (no triggers in no-selection and entangled mode).

        :return: Searched architecture and trace.
        """
        cfg = self.config
        start = time.perf_counter()
        sn = self.supernet

        if self.budget >= sn.max_space_params:
            msg = (
                f"Budget {self.budget:.1f} covers the full search space "
                f"({sn.max_space_params} parameters), returning the full space."
            )
            warnings.warn(msg, UserWarning, stacklevel=1)
            self.trace.warnings.append(msg)
            self._full_space()
        else:
            if phases is None:
                triggers = 0 if cfg.mode in ("no-selection", "entangled") else cfg.Z
                phases = [SearchPhase(cfg.T, triggers)]
            for phase in phases:
                self.run_phase(phase)
            if cfg.project_to_budget:
                self.project_to_budget()

        arch = self.materialize()
        if not arch.kept_entries:
            msg = "The searched architecture is empty."
            warnings.warn(msg, UserWarning, stacklevel=1)
            self.trace.warnings.append(msg)
        self.trace.search_seconds = time.perf_counter() - start
        return arch, self.trace

    def _full_space(self) -> None:
        """Keep every site at its largest dimension."""
        sn = self.supernet
        sel = sn.selection
        last = len(sn.dims) - 1
        sn.arch.theta[:, 1] = sn.arch.theta[:, 0] + 1.0
        if sn.joint is not None:
            sn.joint[:, -1] = sn.joint.max(axis=1) + 1.0
        for n, site in enumerate(sn.sites):
            if site.rank_parameterized:
                sel.d[n] = 1
                sel.k_star[n] = last


def run_search(
    backbone: Backbone,
    space: SpaceConfig,
    data: SplitData,
    config: BudgetConfig,
    provenance: Optional[Dict[str, object]] = None,
) -> Tuple[SearchedArchitecture, SearchTrace]:
    """Search a PEFT architecture within the configured budget.

    :param backbone: Frozen backbone.
    :param space: Search space.
    :param data: Split data.
    :param config: Budget configuration; ``config.mode`` selects the search variant.
    :param provenance: Config hash etc., recorded in the architecture.

    :return: Searched architecture and trace.
    """
    if config.mode in ABLATION_MODES:
        return run_ablation_mode(config.mode, backbone, space, data, config, provenance)
    proc = PEFTSearchProcessor(backbone, space, data, config, provenance)
    return proc.search()


def bilevel_step(
    processor: PEFTSearchProcessor,
    weight_batch: Batch,
    arch_batch: Batch,
    phi_batch: Optional[Batch] = None,
) -> StepStats:
    """One bilevel update of a search processor, see
    :meth:`PEFTSearchProcessor.bilevel_step`."""
    return processor.bilevel_step(weight_batch, arch_batch, phi_batch)


def run_ablation_mode(
    mode: str,
    backbone: Backbone,
    space: SpaceConfig,
    data: SplitData,
    config: BudgetConfig,
    provenance: Optional[Dict[str, object]] = None,
) -> Tuple[SearchedArchitecture, SearchTrace]:
    """Search with one of the ablated variants.

    ``entangled`` searches one joint categorical per site over off and the candidate
    dimensions, without selection. ``binary-then-dim`` first searches keep / drop only
    and then, with the keep vector frozen, the dimensions; ``dim-then-binary`` runs
    the reverse order. The first phase gets half the steps and the larger half of the
    triggers.

    :raises ValueError: Unknown ablation mode.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"Unknown ablation mode {mode!r}, must be one of {ABLATION_MODES}.")
    config = replace(config, mode=mode)
    proc = PEFTSearchProcessor(backbone, space, data, config, provenance)
    if mode == "entangled":
        return proc.search()

    z_first = math.ceil(config.Z / 2)
    t_first = config.T // 2
    binary_first = mode == "binary-then-dim"
    phases = [
        SearchPhase(t_first, z_first, binary=binary_first, dimension=not binary_first),
        SearchPhase(
            config.T - t_first,
            config.Z - z_first,
            binary=not binary_first,
            dimension=binary_first,
        ),
    ]
    return proc.search(phases)


# RE-TRAINING #


def evaluate(
    backbone: Backbone, supernet: SupernetState, batch: Batch, mode: MixMode
) -> Tuple[float, float]:
    """Loss and accuracy of the supernet on a batch, without gradients.

    :return: Mean cross-entropy and accuracy.
    """
    loss, logits = forward_with_peft(backbone, batch, supernet, mode)
    accuracy = float(np.mean(np.argmax(logits.values, axis=1) == batch.labels))
    return float(loss.values), accuracy


def build_discrete_supernet(
    architecture: SearchedArchitecture,
    backbone: Backbone,
    seed: int = 0,
    adapter_nonlinearity: bool = False,
) -> Tuple[SupernetState, MixMode]:
    """Supernet holding only the kept sites of an architecture, freshly initialized.

    :raises ValueError: A kept site is unknown to the backbone or has no valid
        dimension.
    """
    space = SpaceConfig(kinds=PEFT_KINDS, dims=architecture.dims)
    by_name = {site.name: site for site in enumerate_sites(backbone, space, seed=seed)}
    sites, dims = [], []
    for entry in architecture.kept_entries:
        site = by_name.get(entry.name)
        if site is None:
            raise ValueError(f"Site {entry.name} does not exist on this backbone.")
        if entry.dim not in site.dims:
            raise ValueError(f"Site {entry.name} is kept but has no valid dimension.")
        sites.append(replace(site, index=len(sites)))
        dims.append(entry.dim)
    n = len(sites)
    supernet = SupernetState(
        sites,
        ArchWeights.zeros(n, len(space.dims)),
        SelectionState.initial([True] * n, Z=1),
        dims=space.dims,
        adapter_nonlinearity=adapter_nonlinearity,
    )
    return supernet, MixMode.discrete([1] * n, dims)


def retrain(
    architecture: SearchedArchitecture,
    backbone: Backbone,
    data: SplitData,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 32,
    seed: int = 0,
    weight_decay: float = 0.01,
    adapter_nonlinearity: bool = False,
) -> EvalMetrics:
    """Train the kept modules of an architecture from scratch and evaluate them.

    :param architecture: Architecture to train.
    :param backbone: Frozen backbone.
    :param data: Split data; both training halves are used for training.
    :param steps: Training steps.
    :param lr: Learning rate.
    :param batch_size: Rows per batch.
    :param seed: Seed of initialization and batch sampling.
    :param weight_decay: Decoupled weight decay.
    :param adapter_nonlinearity: GELU inside AdapterLR bottlenecks.

    :return: Validation and test metrics.

    :raises ValueError: Negative steps or a kept site without valid dimension.
    """
    if steps < 0:
        raise ValueError("The number of re-training steps must be >= 0.")
    start = time.perf_counter()
    supernet, mode = build_discrete_supernet(
        architecture, backbone, seed=seed, adapter_nonlinearity=adapter_nonlinearity
    )

    if supernet.num_sites > 0:
        optimizer = AdamW(lr, steps, weight_decay)
        batches = iterate_batches(data.train, batch_size, np.random.default_rng([seed, 3]))
        for step in range(steps):
            loss, _ = forward_with_peft(
                backbone, next(batches), supernet, mode, grad={"weights"}
            )
            grads = ad.backward(loss.graph, loss)
            params = supernet.weight_params()
            optimizer.step(params, {k: v for k, v in grads.items() if k in params})
            supernet.load_weight_params(params)
            if step % 100 == 0:
                logger.info("retrain step %d: loss %.4f", step, float(loss.values))

    val_loss, val_acc = evaluate(backbone, supernet, data.val, mode)
    test_loss, test_acc = evaluate(backbone, supernet, data.test, mode)
    trainable = sum(
        param_count(site.kind, site.position, dim)
        for site, dim in zip(supernet.sites, mode.dims)  # noqa: B905
    )
    return EvalMetrics(
        val_loss=val_loss,
        val_accuracy=val_acc,
        test_loss=test_loss,
        test_accuracy=test_acc,
        trainable_params=int(trainable),
        steps=steps if supernet.num_sites else 0,
        seconds=time.perf_counter() - start,
    )

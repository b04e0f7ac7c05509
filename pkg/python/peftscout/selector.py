"""Early selection: expected parameters, module removal and dimension fixing.

The selection state records which sites were permanently removed (``b = 0``) and
which sites have a permanently fixed dimension (``d = 1`` with index ``k_star``).
Both vectors only ever move in one direction.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .search_utils import ascending_order, greedy_prefix, row_softmax
from .utilities.utils import cosine_similarity

KL_FLOOR = 1e-8


class DimensionWindow:
    """Running statistics of the softmaxed phi matrices since the previous trigger.

    Only the first and the last matrix, the mean and the summed squared deviations
    (Welford) are held, so the memory does not grow with the number of steps.

    Example:
        >>> win = DimensionWindow()
        >>> win.push(np.array([[0.5, 0.5]]))
        >>> win.push(np.array([[0.5, 0.5]]))
        >>> win.stability(1)
        array([0.])
    """

    def __init__(self) -> None:
        """Initialize an empty window."""
        self.count = 0
        self.first: Optional[np.ndarray] = None
        self.last: Optional[np.ndarray] = None
        self._mean: Optional[np.ndarray] = None
        self._m2: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.count

    # PROPERTIES #

    @property
    def std(self) -> Optional[np.ndarray]:
        """Population standard deviation per site and candidate, None if empty."""
        if self.count == 0:
            return None
        return np.sqrt(np.maximum(self._m2 / self.count, 0.0))

    # METHODS #

    def push(self, probs: np.ndarray) -> None:
        """Add the softmaxed phi matrix of one step.

        :param probs: Probabilities, shape (N, K).

        :raises ValueError: Shape differs from the matrices already in the window.
        """
        probs = np.array(probs, dtype=np.float64)
        if self.count > 0 and probs.shape != self.first.shape:
            raise ValueError(
                f"Window holds matrices of shape {self.first.shape}, got {probs.shape}."
            )
        self.count += 1
        if self.count == 1:
            self.first = probs.copy()
            self._mean = probs.copy()
            self._m2 = np.zeros_like(probs)
        else:
            delta = probs - self._mean
            self._mean += delta / self.count
            self._m2 += delta * (probs - self._mean)
        self.last = probs

    def clear(self) -> None:
        """Start a new window."""
        self.__init__()

    def copy(self) -> "DimensionWindow":
        """Deep copy of the window."""
        ret = DimensionWindow()
        ret.count = self.count
        for attr in ("first", "last", "_mean", "_m2"):
            value = getattr(self, attr)
            setattr(ret, attr, None if value is None else value.copy())
        return ret

    def stability(self, num_sites: int) -> np.ndarray:
        """Dimension stability of every site over the window.

        Same score as :func:`dimension_stability` on the stacked matrices.

        :param num_sites: Number of sites N.

        :return: Scores, shape (N,); ``inf`` everywhere if the window has fewer than
            two matrices.
        """
        if self.count < 2 or num_sites == 0:
            return np.full(num_sites, np.inf)
        first = np.maximum(self.first, KL_FLOOR)
        last = np.maximum(self.last, KL_FLOOR)
        kl = stats.entropy(first, last, axis=1)
        return np.mean(self.std, axis=1) * kl


@dataclass
class SelectionState:
    """Keep / dimension indicators of all sites plus the trigger schedule.

    :param b: Keep indicator per site (1 = still in the search).
    :param d: Dimension-determined indicator per site.
    :param k_star: Fixed dimension index per site, -1 where undefined.
    :param z: Number of triggers handled so far.
    :param Z: Maximum number of triggers.
    :param v_prev: Potential dimensions at the previous trigger.
    :param phi_window: Running window of the softmaxed phi matrices since the
        previous trigger.
    """

    b: np.ndarray
    d: np.ndarray
    k_star: np.ndarray
    z: int = 0
    Z: int = 1
    v_prev: Optional[np.ndarray] = None
    phi_window: DimensionWindow = field(default_factory=DimensionWindow)

    @classmethod
    def initial(cls, dimension_free: Sequence[bool], Z: int) -> "SelectionState":
        """Everything kept; dimension-free sites are born fixed at index 0.

        :param dimension_free: Per site, does the kind have no dimension choice?
        :param Z: Maximum number of triggers.

        :return: Initial selection state.
        """
        free = np.asarray(dimension_free, dtype=bool)
        n = len(free)
        return cls(
            b=np.ones(n, dtype=np.int64),
            d=free.astype(np.int64),
            k_star=np.where(free, 0, -1).astype(np.int64),
            Z=Z,
        )

    @property
    def num_sites(self) -> int:
        """Number of sites."""
        return len(self.b)

    @property
    def kept(self) -> np.ndarray:
        """Boolean mask of kept sites."""
        return self.b == 1

    @property
    def undetermined(self) -> np.ndarray:
        """Boolean mask of kept sites whose dimension is still searched."""
        return (self.b == 1) & (self.d == 0)

    @property
    def theta_frozen(self) -> np.ndarray:
        """Rows of theta that receive no more updates."""
        return self.b == 0

    @property
    def phi_frozen(self) -> np.ndarray:
        """Rows of phi that receive no more updates."""
        return self.d == 1

    def remove(self, sites: Sequence[int]) -> None:
        """Remove sites for good: ``b = 0``, ``d = 1``, ``k_star`` void."""
        sites = np.asarray(sites, dtype=np.int64)
        self.b[sites] = 0
        self.d[sites] = 1
        self.k_star[sites] = -1

    def copy(self) -> "SelectionState":
        """Deep copy of the state."""
        return replace(
            self,
            b=self.b.copy(),
            d=self.d.copy(),
            k_star=self.k_star.copy(),
            v_prev=None if self.v_prev is None else self.v_prev.copy(),
            phi_window=self.phi_window.copy(),
        )


@dataclass(frozen=True)
class ArchitectureEntry:
    """One site of a searched architecture.

    :param name: Site name, e.g. ``layer0.Q.LoRA``.
    :param kind: PEFT kind.
    :param position: Backbone position name.
    :param kept: Is the module part of the architecture?
    :param dim: Chosen dimension, 0 for dropped sites.
    :param param_count: Trainable parameters, 0 for dropped sites.
    """

    name: str
    kind: str
    position: str
    kept: bool
    dim: int
    param_count: int


@dataclass(frozen=True)
class SearchedArchitecture:
    """Discrete PEFT architecture, the outcome of a search.

    :param entries: One entry per site, in site order.
    :param dims: Candidate dimensions of the search space.
    :param budget: Absolute parameter budget the search aimed at, if any.
    :param provenance: Config hash, seed and mode that produced the architecture.

    :raises ValueError: A kept entry with a dimension outside ``dims`` or a dropped
        entry with parameters.
    """

    entries: Tuple[ArchitectureEntry, ...]
    dims: Tuple[int, ...]
    budget: Optional[float] = None
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for entry in self.entries:
            if entry.kept and entry.dim not in self.dims:
                raise ValueError(
                    f"Site {entry.name}: dimension {entry.dim} is not one of {self.dims}."
                )
            if not entry.kept and (entry.dim != 0 or entry.param_count != 0):
                raise ValueError(
                    f"Site {entry.name} is dropped but has a dimension or parameters."
                )
            if entry.param_count < 0:
                raise ValueError(f"Site {entry.name} has a negative parameter count.")

    @property
    def total_params(self) -> int:
        """Trainable parameters of all kept sites."""
        return int(sum(entry.param_count for entry in self.entries if entry.kept))

    @property
    def kept_entries(self) -> List[ArchitectureEntry]:
        """Entries of the kept sites."""
        return [entry for entry in self.entries if entry.kept]

    @property
    def num_sites(self) -> int:
        """Number of sites in the space the architecture was taken from."""
        return len(self.entries)


# EXPECTED PARAMETERS #


def site_counts(
    phi: np.ndarray, selection: SelectionState, q: np.ndarray
) -> np.ndarray:
    """Expected parameter count of every site if it is kept.

    Fixed sites count ``q_n[k*]``; undetermined ones the phi-weighted mean of ``q_n``;
    removed sites count zero.

    :param phi: Dimension logits, shape (N, K).
    :param selection: Selection state.
    :param q: Parameter counts per site and candidate, shape (N, K).

    :return: Counts, shape (N,).
    """
    q = np.asarray(q, dtype=np.float64)
    if len(q) == 0:
        return np.zeros(0)
    probs = row_softmax(phi)
    counts = np.sum(q * probs, axis=1)
    fixed = (selection.d == 1) & (selection.b == 1)
    counts[fixed] = q[np.flatnonzero(fixed), selection.k_star[fixed]]
    counts[selection.b == 0] = 0.0
    return counts


def keep_probabilities(theta: np.ndarray, selection: SelectionState) -> np.ndarray:
    """Keep probability of every site, zero for removed sites."""
    if len(theta) == 0:
        return np.zeros(0)
    return selection.b * row_softmax(theta)[:, 1]


def expected_site_counts(
    theta: np.ndarray, phi: np.ndarray, selection: SelectionState, q: np.ndarray
) -> np.ndarray:
    """Keep-probability weighted expected count of every site."""
    return keep_probabilities(theta, selection) * site_counts(phi, selection, q)


def expected_parameters(
    theta: np.ndarray, phi: np.ndarray, selection: SelectionState, q: np.ndarray
) -> float:
    """Expected number of trainable parameters of the current supernet.

    :param theta: Binary logits, shape (N, 2), column 1 = keep.
    :param phi: Dimension logits, shape (N, K).
    :param selection: Selection state.
    :param q: Parameter counts per site and candidate, shape (N, K).

    :return: Expected parameter count.

    Example:
        >>> sel = SelectionState.initial([False], Z=1)
        >>> theta, phi = np.array([[-50.0, 50.0]]), np.zeros((1, 3))
        >>> round(expected_parameters(theta, phi, sel, np.array([[32, 128, 256]])), 3)
        138.667
    """
    return float(np.sum(expected_site_counts(theta, phi, selection, q)))


def joint_expected_parameters(
    joint: np.ndarray, selection: SelectionState, q: np.ndarray
) -> float:
    """Expected number of trainable parameters under joint keep / dimension logits.

    :param joint: Joint logits, shape (N, K + 1), column 0 = off.
    :param selection: Selection state.
    :param q: Parameter counts per site and candidate, shape (N, K).

    :return: Expected parameter count.

    Example:
        >>> sel = SelectionState.initial([False], Z=1)
        >>> joint = np.log([[0.4, 0.1, 0.2, 0.3]])
        >>> round(joint_expected_parameters(joint, sel, np.array([[32, 128, 256]])), 3)
        105.6
    """
    q = np.asarray(q, dtype=np.float64)
    if len(q) == 0:
        return 0.0
    probs = row_softmax(joint)
    counts = np.sum(q * probs[:, 1:], axis=1)
    fixed = np.flatnonzero((selection.d == 1) & (selection.b == 1))
    counts[fixed] = (1.0 - probs[fixed, 0]) * q[fixed, selection.k_star[fixed]]
    counts[selection.b == 0] = 0.0
    return float(np.sum(counts))


def reduction_target(E: float, B: float, Z: int, z: int) -> float:
    """Parameter mass to remove at trigger ``z``.

    :param E: Expected parameters before the trigger.
    :param B: Budget.
    :param Z: Maximum number of triggers.
    :param z: Triggers handled so far.

    :return: ``(E - B) / (Z - z)``; values <= 0 mean nothing has to be removed.

    :raises ValueError: Trigger budget exhausted (``z >= Z``).
    """
    if z >= Z:
        raise ValueError(f"Trigger budget exhausted: z = {z} >= Z = {Z}.")
    return (E - B) / (Z - z)


# REMOVAL #


def select_modules_to_remove(
    s_bar: np.ndarray,
    selection: SelectionState,
    expected_counts: np.ndarray,
    R: float,
) -> np.ndarray:
    """Remove the least sensitive kept sites whose expected counts fit into ``R``.

    Kept sites are walked by ascending sensitivity (ties: higher index first); the walk
    stops at the first site whose count would push the removed total above ``R``.
    The selection state is updated in place.

    :param s_bar: Smoothed sensitivities, shape (N,).
    :param selection: Selection state (modified).
    :param expected_counts: Keep-probability weighted site counts, shape (N,).
    :param R: Reduction target.

    :return: The new keep vector ``b``.
    """
    if R <= 0 or not np.any(selection.kept):
        return selection.b.copy()
    order = ascending_order(np.asarray(s_bar, dtype=np.float64), selection.kept)
    mask = greedy_prefix(order, np.asarray(expected_counts, dtype=np.float64), float(R))
    selection.remove(np.flatnonzero(mask))
    return selection.b.copy()


# DIMENSION FIXING #


def dimension_stability(window: np.ndarray) -> float:
    """Stability of one site's dimension distribution over the trigger window.

    :param window: Softmaxed phi rows of the site, shape (steps, K).

    :return: Mean standard deviation over the candidates times
        ``KL(first || last)``; ``inf`` if the window has fewer than two rows.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or len(window) < 2:
        return float("inf")
    sigma = np.std(window, axis=0)
    first = np.maximum(window[0], KL_FLOOR)
    last = np.maximum(window[-1], KL_FLOOR)
    return float(np.mean(sigma) * stats.entropy(first, last))


def potential_dims(
    phi: np.ndarray, selection: SelectionState, dims: Sequence[int]
) -> np.ndarray:
    """Current favourite dimension of every site.

    :param phi: Dimension logits, shape (N, K).
    :param selection: Selection state.
    :param dims: Candidate dimensions.

    :return: Dimension per site; 0 for removed sites, ``dims[k*]`` for fixed ones.
    """
    dims_arr = np.asarray(dims, dtype=np.int64)
    if len(phi) == 0:
        return np.zeros(0, dtype=np.int64)
    v = dims_arr[np.argmax(row_softmax(phi), axis=1)]
    fixed = (selection.d == 1) & (selection.b == 1)
    v[fixed] = dims_arr[selection.k_star[fixed]]
    v[selection.b == 0] = 0
    return v


def dim_fix_count(
    selection: SelectionState, v_prev: np.ndarray, v_now: np.ndarray, Z: int, z: int
) -> int:
    """Number of dimensions to fix at trigger ``z``.

    :param selection: Selection state before the trigger's removals.
    :param v_prev: Potential dimensions at the previous trigger.
    :param v_now: Potential dimensions now.
    :param Z: Maximum number of triggers.
    :param z: Triggers handled so far.

    :return: Fix count, never negative.

    :raises ValueError: Trigger budget exhausted (``z >= Z``).
    """
    if z >= Z:
        raise ValueError(f"Trigger budget exhausted: z = {z} >= Z = {Z}.")
    undetermined = int(np.sum(selection.d == 0))
    if undetermined == 0:
        return 0
    cos = cosine_similarity(v_prev, v_now)
    # 1e-9 keeps an exact quotient from flooring one short
    return max(0, int(np.floor(undetermined * cos / (Z - z) + 1e-9)))


def fix_dimensions(
    lam: np.ndarray, Y: int, v_now: np.ndarray, selection: SelectionState, dims: Sequence[int]
) -> List[int]:
    """Fix the dimensions of the ``Y`` most stable undetermined sites.

    Sites with an infinite stability score are not fixable yet. The selection state is
    updated in place.

    :param lam: Stability score per site, shape (N,).
    :param Y: Number of sites to fix.
    :param v_now: Potential dimensions, shape (N,).
    :param selection: Selection state (modified).
    :param dims: Candidate dimensions.

    :return: Indices of the fixed sites.
    """
    if Y <= 0:
        return []
    lam = np.asarray(lam, dtype=np.float64)
    candidates = np.flatnonzero(selection.undetermined & np.isfinite(lam))
    order = candidates[np.lexsort((candidates, lam[candidates]))]
    fixed = [int(n) for n in order[:Y]]
    dims = list(dims)
    for n in fixed:
        selection.d[n] = 1
        selection.k_star[n] = dims.index(int(v_now[n]))
    return fixed

"""Module sensitivity scores, their moving average and the stability trigger."""

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional, Sequence, Tuple

import numpy as np

from .search_utils import descending_order, greedy_prefix
from .utilities.utils import cosine_similarity


def _flat(arrays) -> np.ndarray:
    """Flatten and concatenate one site's arrays (or pass a single array through)."""
    if arrays is None:
        return np.zeros(0)
    if isinstance(arrays, np.ndarray):
        return arrays.ravel().astype(np.float64)
    if len(arrays) == 0:
        return np.zeros(0)
    return np.concatenate([np.asarray(arr, dtype=np.float64).ravel() for arr in arrays])


def module_sensitivity(
    grads_train: Sequence,
    grads_val: Sequence,
    weights: Sequence,
    keep: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Raw sensitivity score of every site.

    For each site the mean of ``|w * G|`` on the training gradients is added to the
    same quantity on the validation gradients, the latter weighted by the cosine
    similarity of both gradients. A zero gradient on either side gives a zero weight.

    :param grads_train: Per site, gradient array(s) from the training batch.
    :param grads_val: Per site, gradient array(s) from the validation batch.
    :param weights: Per site, weight array(s) aligned with the gradients.
    :param keep: Optional keep vector; removed sites score 0.

    :return: Raw scores, shape (N,).

    :raises ValueError: Site counts or per-site sizes do not match.

    Example:
        >>> w, g = [np.array([1.0, -2.0])], [np.array([0.5, 0.5])]
        >>> module_sensitivity(g, g, w)
        array([1.5])
    """
    if not len(grads_train) == len(grads_val) == len(weights):
        raise ValueError("Gradients and weights must be given for the same sites.")
    scores = np.zeros(len(weights))
    for n, (g_tr, g_val, w) in enumerate(zip(grads_train, grads_val, weights)):  # noqa: B905
        if keep is not None and keep[n] == 0:
            continue
        g_tr, g_val, w = _flat(g_tr), _flat(g_val), _flat(w)
        if not g_tr.size == g_val.size == w.size:
            raise ValueError(f"Site {n}: gradients and weights differ in size.")
        if w.size == 0:
            continue
        f_tr = np.mean(np.abs(w * g_tr))
        f_val = np.mean(np.abs(w * g_val))
        if np.linalg.norm(g_tr) == 0.0 or np.linalg.norm(g_val) == 0.0:
            alpha = 0.0
        else:
            alpha = cosine_similarity(g_tr, g_val)
        scores[n] = f_tr + alpha * f_val
    return scores


@dataclass
class SensitivityState:
    """Exponential moving average of the sensitivity scores.

    :param s_bar: Smoothed scores.
    :param gamma: Smoothing factor in [0, 1]; 1 keeps the first observation forever.
    :param initialized: Per entry, has a first score been seen?
    """

    s_bar: np.ndarray
    gamma: float = 0.85
    initialized: np.ndarray = None

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1].")
        self.s_bar = np.asarray(self.s_bar, dtype=np.float64)
        if self.initialized is None:
            self.initialized = np.zeros(len(self.s_bar), dtype=bool)

    @classmethod
    def empty(cls, num_sites: int, gamma: float = 0.85) -> "SensitivityState":
        """State without any observation."""
        return cls(np.zeros(num_sites), gamma)


def ema_update(state: SensitivityState, raw: np.ndarray) -> SensitivityState:
    """Fold raw scores into the moving average (in place).

    Entries without a previous observation take the raw score verbatim.

    :param state: Sensitivity state.
    :param raw: Raw scores, shape (N,).

    :return: The updated state.

    :raises ValueError: Non-finite or misshaped scores.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != state.s_bar.shape:
        raise ValueError(f"Expected {state.s_bar.shape} scores, got {raw.shape}.")
    if not np.all(np.isfinite(raw)):
        raise ValueError("Sensitivity scores must be finite.")
    gamma = state.gamma
    init = state.initialized
    state.s_bar = np.where(init, gamma * state.s_bar + (1.0 - gamma) * raw, raw)
    state.initialized = np.ones_like(init)
    return state


def importance_indicator(
    s_bar: np.ndarray, expected_counts: np.ndarray, b: np.ndarray, B: float
) -> np.ndarray:
    """Mark the most sensitive kept sites whose counts fit into the budget.

    Kept sites are walked by descending score (ties: lower index first); the walk
    stops at the first site that would overflow the budget.

    :param s_bar: Smoothed scores, shape (N,).
    :param expected_counts: Parameter count per site, shape (N,).
    :param b: Keep vector.
    :param B: Budget.

    :return: Binary indicator, shape (N,).
    """
    s_bar = np.asarray(s_bar, dtype=np.float64)
    if B <= 0 or len(s_bar) == 0:
        return np.zeros(len(s_bar), dtype=np.int64)
    order = descending_order(s_bar, np.asarray(b) == 1)
    mask = greedy_prefix(order, np.asarray(expected_counts, dtype=np.float64), float(B))
    return mask.astype(np.int64)


@dataclass
class IndicatorHistory:
    """The most recent ``H + 1`` importance indicators.

    :param window: Number of consecutive pairs the stability score averages over.
    """

    window: int = 5
    buffer: Deque[np.ndarray] = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("The stability window must be a positive integer.")
        self.buffer = deque(self.buffer, maxlen=self.window + 1)

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, indicator: np.ndarray) -> None:
        """Append an indicator, dropping the oldest one when full."""
        self.buffer.append(np.asarray(indicator, dtype=np.int64).copy())

    def clear(self) -> None:
        """Forget all indicators."""
        self.buffer.clear()


def stability_and_trigger(
    history: IndicatorHistory, tau: float, t: int = 0
) -> Tuple[float, bool]:
    """Stability of the recent indicators and whether selection may happen.

    :param history: Indicator history.
    :param tau: Stability threshold.
    :param t: Current step (informational).

    :return: Mean cosine similarity of the ``H`` most recent consecutive indicator
        pairs (0 during warm-up) and whether it reached ``tau``.
    """
    if len(history) < history.window + 1:
        return 0.0, False
    vecs = list(history.buffer)
    sims = [cosine_similarity(a, b) for a, b in zip(vecs[:-1], vecs[1:])]  # noqa: B905
    beta = float(np.mean(sims))
    return beta, beta >= tau

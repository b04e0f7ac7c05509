"""Utilities for the search processor. Mostly methods that can be jitted."""

from typing import Dict, Optional

from numba import njit
import numpy as np


@njit
def greedy_prefix(
    order: np.ndarray, counts: np.ndarray, limit: float
) -> np.ndarray:  # pragma: nocover
    """Mark entries along an order while their running count stays within a limit.

    The walk stops at the first entry that would overflow the limit; that entry and
    all later ones stay unmarked.

    :param order: Indices into ``counts`` in the order they are considered.
    :param counts: Non-negative count per index.
    :param limit: Maximum running count.

    :return: Boolean mask over ``counts``.
    """
    mask = np.zeros(len(counts), dtype=np.bool_)
    acc = 0.0
    for n in order:
        if acc + counts[n] <= limit:
            acc += counts[n]
            mask[n] = True
        else:
            break
    return mask


def descending_order(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Indices of candidates by descending score, ties broken toward lower index.

    :param scores: Score per index.
    :param candidates: Boolean mask of indices to consider.

    :return: Ordered index array.
    """
    idx = np.flatnonzero(candidates)
    return idx[np.lexsort((idx, -scores[idx]))].astype(np.int64)


def ascending_order(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Indices of candidates by ascending score, ties broken toward higher index.

    :param scores: Score per index.
    :param candidates: Boolean mask of indices to consider.

    :return: Ordered index array.
    """
    idx = np.flatnonzero(candidates)
    return idx[np.lexsort((-idx, scores[idx]))].astype(np.int64)


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax of every row (max-subtracted)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def hard_one_hot(probs: np.ndarray) -> np.ndarray:
    """One-hot of the row-wise argmax, ties broken toward the smaller index."""
    hard = np.zeros_like(probs)
    hard[np.arange(len(probs)), np.argmax(probs, axis=-1)] = 1.0
    return hard


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Draw standard Gumbel noise."""
    return rng.gumbel(0.0, 1.0, size=shape)


def linear_decay(base: float, step: int, total: int) -> float:
    """Linearly decayed value from ``base`` at step 0 to zero at ``total``."""
    if total <= 0:
        return base
    return base * max(0.0, 1.0 - step / total)


class AdamW:
    """Adam with decoupled weight decay and a linear learning-rate decay.

    Parameters are plain numpy arrays in a dictionary and are replaced on update.
    Rows listed as frozen keep their values and moment estimates untouched.

    Example:
        >>> params = {"w": np.array([1.0, -1.0])}
        >>> opt = AdamW(lr=0.1, total_steps=100)
        >>> opt.step(params, {"w": np.array([0.5, -0.5])})
    """

    def __init__(
        self,
        lr: float,
        total_steps: int,
        weight_decay: float = 0.0,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        """Initialize the optimizer.

        :param lr: Base learning rate.
        :param total_steps: Steps over which the rate decays linearly to zero.
        :param weight_decay: Decoupled weight decay factor.
        :param betas: Decay rates of the first and second moments.
        :param eps: Denominator guard.

        :raises ValueError: Negative learning rate or weight decay.
        """
        if lr < 0 or weight_decay < 0:
            raise ValueError("Learning rate and weight decay must be >= 0.")
        self.lr = lr
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps

        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    @property
    def current_lr(self) -> float:
        """Learning rate that the next step will use."""
        return linear_decay(self.lr, self.t, self.total_steps)

    def step(
        self,
        params: Dict[str, np.ndarray],
        grads: Dict[str, np.ndarray],
        frozen_rows: Optional[Dict[str, np.ndarray]] = None,
    ) -> None:
        """Apply one update to every parameter that has a gradient.

        :param params: Parameters, updated in place (arrays are replaced).
        :param grads: Gradients by parameter name; missing names are skipped.
        :param frozen_rows: Boolean row masks by parameter name; masked rows are
            left untouched.
        """
        lr = self.current_lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        for name, grad in grads.items():
            if name not in params or grad is None:
                continue
            param = params[name]
            m = self._m.get(name, np.zeros_like(param))
            v = self._v.get(name, np.zeros_like(param))

            m_new = self.beta1 * m + (1.0 - self.beta1) * grad
            v_new = self.beta2 * v + (1.0 - self.beta2) * grad * grad
            update = lr * (m_new / bc1) / (np.sqrt(v_new / bc2) + self.eps)
            new = param - update - lr * self.weight_decay * param

            if frozen_rows is not None and name in frozen_rows:
                rows = np.asarray(frozen_rows[name], dtype=bool)
                new[rows] = param[rows]
                m_new[rows] = m[rows]
                v_new[rows] = v[rows]

            params[name] = new
            self._m[name] = m_new
            self._v[name] = v_new

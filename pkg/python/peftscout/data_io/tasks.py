"""Synthetic sequence-classification tasks that stand in for real benchmarks.

Every task draws token sequences uniformly at random and labels them with a
deterministic rule, so labels are a pure function of the tokens.
"""

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

TASK_KINDS = ("copy-class", "parity", "majority", "keyed-lookup")


@dataclass(frozen=True)
class Batch:
    """A batch of token sequences with their labels.

    :param tokens: Integer token ids, shape (batch, seq_len).
    :param labels: Integer class labels, shape (batch,).
    """

    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: np.ndarray) -> "Batch":
        """Return the rows selected by ``index`` as a new batch."""
        return Batch(self.tokens[index], self.labels[index])


@dataclass(frozen=True)
class SplitData:
    """Disjoint data splits used by the search and by re-training.

    The training data is halved into a split for the PEFT weights and one for the
    architecture weights; ``val`` and ``test`` never contribute a gradient.
    """

    weight_train: Batch
    arch_train: Batch
    val: Batch
    test: Batch

    @property
    def train(self) -> Batch:
        """Both training halves together (used for re-training)."""
        return Batch(
            np.concatenate([self.weight_train.tokens, self.arch_train.tokens]),
            np.concatenate([self.weight_train.labels, self.arch_train.labels]),
        )


@dataclass(frozen=True)
class SyntheticTask:
    """Specification of a synthetic task.

    :param kind: One of ``copy-class``, ``parity``, ``majority``, ``keyed-lookup``.
    :param vocab_size: Number of distinct tokens.
    :param seq_len: Length of every sequence.
    :param num_classes: Number of labels.
    :param num_train: Training sequences (halved into weight / arch training).
    :param num_val: Validation sequences.
    :param num_test: Test sequences.
    :param seed: Seed of the generator.

    :raises ValueError: Invalid extents or a kind that cannot express the classes.
    """

    kind: str = "keyed-lookup"
    vocab_size: int = 32
    seq_len: int = 16
    num_classes: int = 4
    num_train: int = 2000
    num_val: int = 500
    num_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(
                f"Unknown task kind {self.kind!r}, must be one of {TASK_KINDS}."
            )
        for name in ("vocab_size", "seq_len", "num_classes", "num_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer.")
        if self.num_train < 2:
            raise ValueError("num_train must be at least 2 to split it in halves.")
        if self.num_val < 1 or self.num_test < 1:
            raise ValueError("num_val and num_test must be positive integers.")
        if self.num_classes > max_classes(self.kind, self.vocab_size):
            raise ValueError(
                f"Task kind {self.kind!r} with vocab_size {self.vocab_size} can "
                f"express at most {max_classes(self.kind, self.vocab_size)} classes, "
                f"but {self.num_classes} were requested."
            )
        if self.kind == "parity" and self.num_classes != 2:
            raise ValueError("The parity task has exactly 2 classes.")
        if self.kind == "keyed-lookup" and self.seq_len < 2:
            raise ValueError("keyed-lookup needs sequences of at least two tokens.")
        total = self.num_train + self.num_val + self.num_test
        if total > float(self.vocab_size) ** self.seq_len:
            raise ValueError(
                "Not enough distinct sequences for disjoint splits of the requested size."
            )

    def to_dict(self) -> dict:
        """Return the task as plain dictionary."""
        return asdict(self)


def max_classes(kind: str, vocab_size: int) -> int:
    """Number of classes a task kind can express.

    :param kind: Task kind.
    :param vocab_size: Size of the vocabulary.

    :return: Maximum number of classes.
    """
    if kind == "parity":
        return 2
    return vocab_size


def label_sequences(kind: str, tokens: np.ndarray, num_classes: int) -> np.ndarray:
    """Label token sequences with the rule of a task kind.

    :param kind: Task kind.
    :param tokens: Token ids, shape (n, seq_len).
    :param num_classes: Number of classes.

    :return: Labels, shape (n,).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    classes = tokens % num_classes
    if kind == "copy-class":
        return classes[:, 0]
    if kind == "parity":
        return (np.sum(tokens % 2, axis=1) % 2).astype(np.int64)
    if kind == "majority":
        counts = np.stack([(classes == c).sum(axis=1) for c in range(num_classes)], axis=1)
        return np.argmax(counts, axis=1).astype(np.int64)  # ties -> smallest class
    if kind == "keyed-lookup":
        seq_len = tokens.shape[1]
        where = 1 + tokens[:, 0] % (seq_len - 1)
        return classes[np.arange(len(tokens)), where]
    raise ValueError(f"Unknown task kind {kind!r}.")


def generate_task(spec: SyntheticTask) -> SplitData:
    """Generate the four disjoint splits of a synthetic task.

    Sequences are drawn uniformly; a sequence already drawn for any split is
    rejected, which makes the splits disjoint by construction.

    :param spec: Task specification.

    :return: Split data.

    Example:
        >>> data = generate_task(SyntheticTask(kind="parity", num_classes=2))
        >>> set(np.unique(data.test.labels)) <= {0, 1}
        True
    """
    rng = np.random.default_rng(spec.seed)
    total = spec.num_train + spec.num_val + spec.num_test

    seen = set()
    rows = []
    while len(rows) < total:
        draw = rng.integers(0, spec.vocab_size, size=(total - len(rows), spec.seq_len))
        for row in draw:
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)

    tokens = np.array(rows, dtype=np.int64)
    labels = label_sequences(spec.kind, tokens, spec.num_classes)

    half = spec.num_train // 2
    bounds = np.cumsum([half, spec.num_train - half, spec.num_val])
    parts = np.split(np.arange(total), bounds)
    splits = [Batch(tokens[ind], labels[ind]) for ind in parts]
    return SplitData(*splits)


def iterate_batches(
    data: Batch, batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """Yield random batches forever, reshuffling after every epoch.

    :param data: Split to draw from.
    :param batch_size: Rows per batch; capped at the split size.
    :param rng: Random generator (owned by the caller).

    :return: Infinite iterator of batches.

    :raises ValueError: Batch size is not positive or the split is empty.
    """
    if batch_size < 1:
        raise ValueError("The batch size must be a positive integer.")
    if len(data) == 0:
        raise ValueError("Cannot draw batches from an empty split.")
    batch_size = min(batch_size, len(data))
    while True:
        order = rng.permutation(len(data))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield data.subset(order[start : start + batch_size])

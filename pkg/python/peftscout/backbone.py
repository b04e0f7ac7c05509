"""Small encoder-only transformer classifier that plays the frozen pretrained model.

The backbone exposes a catalog of attachment positions. PEFT modules hook into the
forward pass at those positions; the backbone weights themselves never change once
pretraining is done.
"""

from dataclasses import asdict, dataclass
import hashlib
import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .data_io.tasks import Batch, SyntheticTask, generate_task, iterate_batches

logger = logging.getLogger(__name__)

LINEAR_KINDS = ("Q", "K", "V", "O", "W1", "W2")
POSITION_KINDS = LINEAR_KINDS + ("LN",)

# hook(position, site input, base output) -> modified output
SiteHook = Callable[["Position", ad.Tensor, ad.Tensor], ad.Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    """Extents of the toy transformer.

    :param ffn_layer_norm: Add a layer norm after the feed-forward block and list it
        in the position catalog.

    :raises ValueError: Non-positive extents or ``model_dim`` not divisible by
        ``num_heads``.
    """

    num_layers: int = 2
    model_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 2
    vocab_size: int = 32
    max_seq_len: int = 16
    num_classes: int = 4
    ffn_layer_norm: bool = False

    def __post_init__(self):
        for name in (
            "num_layers",
            "model_dim",
            "ffn_dim",
            "num_heads",
            "vocab_size",
            "max_seq_len",
            "num_classes",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer.")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim ({self.model_dim}) must be divisible by num_heads "
                f"({self.num_heads})."
            )

    def to_dict(self) -> dict:
        """Return the configuration as plain dictionary."""
        return asdict(self)


@dataclass(frozen=True)
class Position:
    """Attachment position in the backbone.

    :param layer: Layer index.
    :param kind: One of Q, K, V, O, W1, W2, LN.
    :param d_in: Input width of the wrapped operation.
    :param d_out: Output width of the wrapped operation.
    :param slot: Distinguishes the attention (``attn``) and feed-forward (``ffn``)
        layer norms; empty for linear positions.
    """

    layer: int
    kind: str
    d_in: int
    d_out: int
    slot: str = ""

    @property
    def name(self) -> str:
        """Unique name of the position, e.g. ``layer0.Q`` or ``layer1.LN_attn``."""
        suffix = f"_{self.slot}" if self.slot else ""
        return f"layer{self.layer}.{self.kind}{suffix}"

    @property
    def is_linear(self) -> bool:
        """Is this a linear (matrix) position?"""
        return self.kind in LINEAR_KINDS


def position_catalog(config: BackboneConfig) -> List[Position]:
    """Enumerate the attachment positions of a backbone configuration.

    Per layer: the six linear positions in the order Q, K, V, O, W1, W2 followed by
    the post-attention layer norm (and the post-FFN one if enabled).

    :param config: Backbone configuration.

    :return: Ordered list of positions.
    """
    dim, ffn = config.model_dim, config.ffn_dim
    widths = {
        "Q": (dim, dim),
        "K": (dim, dim),
        "V": (dim, dim),
        "O": (dim, dim),
        "W1": (dim, ffn),
        "W2": (ffn, dim),
    }
    catalog = []
    for layer in range(config.num_layers):
        for kind in LINEAR_KINDS:
            catalog.append(Position(layer, kind, *widths[kind]))
        catalog.append(Position(layer, "LN", dim, dim, slot="attn"))
        if config.ffn_layer_norm:
            catalog.append(Position(layer, "LN", dim, dim, slot="ffn"))
    return catalog


class Backbone:
    """Frozen transformer classifier with named attachment positions.

    Example:
        >>> bb = build_backbone(BackboneConfig(), seed=0)
        >>> len(bb.catalog)
        14
    """

    def __init__(
        self, config: BackboneConfig, params: Dict[str, np.ndarray], frozen: bool = False
    ) -> None:
        """Initialize the backbone from named parameter arrays.

        :param config: Backbone configuration.
        :param params: Named parameter arrays.
        :param frozen: Are the parameters frozen already?
        """
        self.config = config
        self.params = params
        self.catalog = position_catalog(config)
        self.frozen = frozen
        self.pretrain_losses: List[float] = []
        self.pretrain_loss: Optional[float] = None

    # PROPERTIES #

    @property
    def param_count(self) -> int:
        """Total number of backbone parameters."""
        return int(sum(arr.size for arr in self.params.values()))

    @property
    def position_names(self) -> List[str]:
        """Names of the catalog positions, in catalog order."""
        return [pos.name for pos in self.catalog]

    # METHODS #

    def fingerprint(self) -> str:
        """SHA-256 over the parameter names and bytes (sorted by name)."""
        sha = hashlib.sha256()
        for name in sorted(self.params):
            sha.update(name.encode("utf-8"))
            sha.update(np.ascontiguousarray(self.params[name]).tobytes())
        return sha.hexdigest()

    def encode(
        self,
        graph: ad.ComputeGraph,
        tokens: np.ndarray,
        hook: Optional[SiteHook] = None,
        trainable: bool = False,
    ) -> ad.Tensor:
        """Run the backbone on a token batch and return the class logits.

        :param graph: Graph to record on.
        :param tokens: Token ids, shape (batch, seq_len).
        :param hook: Called at every catalog position with the position, the input of
            the wrapped operation, and its output; returns the (modified) output.
        :param trainable: Let the backbone parameters require a gradient (pretraining).

        :return: Logits, shape (batch, num_classes).

        :raises ValueError: Tokens out of range or sequence too long.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] > cfg.max_seq_len:
            raise ValueError(
                f"Tokens must have shape (batch, <= {cfg.max_seq_len}), got {tokens.shape}."
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"Token ids must lie in [0, {cfg.vocab_size}).")
        if trainable and self.frozen:
            raise ValueError("The backbone is frozen and cannot be trained anymore.")

        p = {
            name: graph.leaf(arr, name=f"backbone.{name}", requires_grad=trainable)
            for name, arr in self.params.items()
        }
        positions = {pos.name: pos for pos in self.catalog}

        def site(name: str, x: ad.Tensor, out: ad.Tensor) -> ad.Tensor:
            if hook is None:
                return out
            return hook(positions[name], x, out)

        def linear(layer: int, kind: str, x: ad.Tensor) -> ad.Tensor:
            pre = f"layer{layer}.{kind}"
            out = ad.add(ad.matmul(x, p[f"{pre}.weight"]), p[f"{pre}.bias"])
            return site(pre, x, out)

        def norm(layer: int, slot: str, x: ad.Tensor) -> ad.Tensor:
            pre = f"layer{layer}.LN_{slot}"
            xhat = ad.layer_norm(x)
            out = ad.add(ad.mul(xhat, p[f"{pre}.gain"]), p[f"{pre}.bias"])
            return site(pre, xhat, out)

        batch, seq_len = tokens.shape
        heads = cfg.num_heads
        head_dim = cfg.model_dim // heads
        positions_ids = np.broadcast_to(np.arange(seq_len), tokens.shape)

        x = ad.add(
            ad.embedding(p["embed.token"], tokens),
            ad.embedding(p["embed.position"], positions_ids),
        )

        def split_heads(t: ad.Tensor) -> ad.Tensor:
            t = ad.reshape(t, (batch, seq_len, heads, head_dim))
            t = ad.permute(t, (0, 2, 1, 3))
            return ad.reshape(t, (batch * heads, seq_len, head_dim))

        for layer in range(cfg.num_layers):
            q = split_heads(linear(layer, "Q", x))
            k = split_heads(linear(layer, "K", x))
            v = split_heads(linear(layer, "V", x))
            scores = ad.scale(
                ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(head_dim)
            )
            ctx = ad.matmul(ad.softmax(scores), v)
            ctx = ad.reshape(ctx, (batch, heads, seq_len, head_dim))
            ctx = ad.reshape(ad.permute(ctx, (0, 2, 1, 3)), (batch, seq_len, cfg.model_dim))
            attn = linear(layer, "O", ctx)
            x = norm(layer, "attn", ad.add(x, attn))

            hidden = ad.gelu(linear(layer, "W1", x))
            x = ad.add(x, linear(layer, "W2", hidden))
            if cfg.ffn_layer_norm:
                x = norm(layer, "ffn", x)

        xhat = ad.layer_norm(x)
        x = ad.add(ad.mul(xhat, p["final_ln.gain"]), p["final_ln.bias"])
        pooled = ad.mean(x, axis=1)
        return ad.add(ad.matmul(pooled, p["head.weight"]), p["head.bias"])

    def loss(
        self, batch: Batch, hook: Optional[SiteHook] = None, trainable: bool = False
    ) -> Tuple[ad.Tensor, ad.Tensor]:
        """Mean cross-entropy of the backbone (with optional hook) on a batch.

        :return: Loss (scalar) and logits, recorded on a fresh graph.
        """
        graph = ad.ComputeGraph()
        logits = self.encode(graph, batch.tokens, hook=hook, trainable=trainable)
        return ad.cross_entropy(logits, batch.labels), logits


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    """Create a backbone with seeded scaled-normal initialization.

    Matrices are drawn from N(0, 0.02^2), biases are zero, layer-norm gains one.

    :param config: Backbone configuration.
    :param seed: Seed for the initialization.

    :return: New (not yet frozen) backbone.
    """
    rng = np.random.default_rng(seed)
    dim, ffn = config.model_dim, config.ffn_dim
    std = 0.02

    def normal(*shape: int) -> np.ndarray:
        return rng.normal(0.0, std, size=shape)

    params = {
        "embed.token": normal(config.vocab_size, dim),
        "embed.position": normal(config.max_seq_len, dim),
    }
    for pos in position_catalog(config):
        if pos.is_linear:
            params[f"{pos.name}.weight"] = normal(pos.d_in, pos.d_out)
            params[f"{pos.name}.bias"] = np.zeros(pos.d_out)
        else:
            params[f"{pos.name}.gain"] = np.ones(pos.d_out)
            params[f"{pos.name}.bias"] = np.zeros(pos.d_out)
    params["final_ln.gain"] = np.ones(dim)
    params["final_ln.bias"] = np.zeros(dim)
    params["head.weight"] = normal(dim, config.num_classes)
    params["head.bias"] = np.zeros(config.num_classes)
    return Backbone(config, params)


def pretrain_backbone(
    backbone: Backbone,
    task: SyntheticTask,
    steps: int,
    lr: float = 0.1,
    batch_size: int = 32,
    seed: int = 0,
) -> Backbone:
    """Train the backbone by plain gradient descent, then freeze it for good.

    :param backbone: Backbone to train (modified in place).
    :param task: Synthetic task to pretrain on; its training split is used.
    :param steps: Number of gradient steps (0 only freezes).
    :param lr: Learning rate.
    :param batch_size: Rows per batch.
    :param seed: Seed for batch sampling.

    :return: The same, now frozen, backbone.

    :raises ValueError: Negative steps, already frozen backbone, or a task that does
        not fit the backbone.
    """
    if steps < 0:
        raise ValueError("The number of pretraining steps must be >= 0.")
    if backbone.frozen:
        raise ValueError("The backbone is already frozen.")
    cfg = backbone.config
    if task.vocab_size > cfg.vocab_size or task.num_classes > cfg.num_classes:
        raise ValueError("The task vocabulary / classes exceed the backbone's extents.")
    if task.seq_len > cfg.max_seq_len:
        raise ValueError("The task sequences are longer than max_seq_len.")

    if steps > 0:
        data = generate_task(task).train
        batches = iterate_batches(data, batch_size, np.random.default_rng(seed))
        for step in range(steps):
            loss, _ = backbone.loss(next(batches), trainable=True)
            grads = ad.backward(loss.graph, loss)
            for name in backbone.params:
                backbone.params[name] = backbone.params[name] - lr * grads[f"backbone.{name}"]
            backbone.pretrain_losses.append(float(loss.values))
            if step % 100 == 0:
                logger.info("pretrain step %d: loss %.4f", step, float(loss.values))
        backbone.pretrain_loss = backbone.pretrain_losses[-1]

    backbone.frozen = True
    return backbone

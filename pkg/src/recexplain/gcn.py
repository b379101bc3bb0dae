"""Collaborative signal encoder: bipartite graph propagation plus a trained projection.

Propagation follows the degree-normalized neighbor-sum scheme

    e_u^(l+1) = sum_{i in N_u} e_i^(l) / (sqrt(|N_u|) * sqrt(|N_i|))

with the symmetric update for items, and the final embedding is the mean of
all layer outputs including layer 0. A three-layer feedforward net projects
the d_gcn-wide embeddings to the generator's width d_llm; it is trained by
negative log-likelihood against a frozen, pluggable token-likelihood head.

All math is float64 numpy, single-threaded, and deterministic per seed, so
analytic gradients can be checked against central finite differences.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .corpus import InteractionGraph


class GcnError(ValueError):
    """Shape mismatch, invalid probabilities, or a diverged training run."""


# ---------------------------------------------------------------------------
# types


@dataclass
class EmbeddingTable:
    """Trainable user/item embedding rows plus the layer count used with them."""

    users: np.ndarray
    items: np.ndarray
    layers: int

    def __post_init__(self) -> None:
        self.users = np.asarray(self.users, dtype=np.float64)
        self.items = np.asarray(self.items, dtype=np.float64)
        if self.users.ndim != 2 or self.items.ndim != 2:
            raise GcnError("embedding tables must be 2-D")
        if self.users.shape[1] != self.items.shape[1]:
            raise GcnError("user and item embedding widths differ")
        if self.layers < 0:
            raise GcnError("layer count must be non-negative")
        if not (np.isfinite(self.users).all() and np.isfinite(self.items).all()):
            raise GcnError("embedding table contains NaN or Inf")

    @property
    def dim(self) -> int:
        return int(self.users.shape[1])


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "identity":
        return a
    raise GcnError(f"unknown activation {name!r}")


def _activate_grad(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(a)
    raise GcnError(f"unknown activation {name!r}")


@dataclass
class ProjectionNet:
    """Three affine layers with an elementwise nonlinearity between them.

    Shapes compose d_in -> hidden -> hidden -> d_out. ``activation`` may be
    set to "identity" in test fixtures to make the net a pure linear map.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise GcnError("projection net needs exactly three layers")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for k in range(3):
            if self.weights[k].shape[0] != self.biases[k].shape[0]:
                raise GcnError(f"layer {k}: weight/bias row mismatch")
            if k > 0 and self.weights[k].shape[1] != self.weights[k - 1].shape[0]:
                raise GcnError(f"layer {k}: does not compose with layer {k - 1}")
        for arr in (*self.weights, *self.biases):
            if not np.isfinite(arr).all():
                raise GcnError("projection net parameters must be finite")

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        hidden: int = 256,
        *,
        rng: np.random.Generator,
        activation: str = "relu",
    ) -> "ProjectionNet":
        """Scaled-uniform fan-in init for weights, zero biases."""
        dims = [(hidden, d_in), (hidden, hidden), (d_out, hidden)]
        weights = []
        for n_out, n_in in dims:
            bound = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases = [np.zeros(n_out) for n_out, _ in dims]
        return cls(weights=weights, biases=biases, activation=activation)

    @property
    def d_in(self) -> int:
        return int(self.weights[0].shape[1])

    @property
    def d_out(self) -> int:
        return int(self.weights[2].shape[0])

    @property
    def hidden(self) -> int:
        return int(self.weights[0].shape[0])

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Forward pass keeping pre-activations for the backward pass."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d_in,):
            raise GcnError(f"input width {x.shape} does not match net input {self.d_in}")
        a1 = self.weights[0] @ x + self.biases[0]
        h1 = _activate(self.activation, a1)
        a2 = self.weights[1] @ h1 + self.biases[1]
        h2 = _activate(self.activation, a2)
        y = self.weights[2] @ h2 + self.biases[2]
        return y, (x, a1, h1, a2, h2)

    def backward(
        self, cache: tuple, grad_out: np.ndarray, grads: "NetGrads"
    ) -> np.ndarray:
        """Accumulate parameter gradients into ``grads``; return grad wrt input."""
        x, a1, h1, a2, h2 = cache
        grads.weights[2] += np.outer(grad_out, h2)
        grads.biases[2] += grad_out
        gh2 = self.weights[2].T @ grad_out
        ga2 = gh2 * _activate_grad(self.activation, a2)
        grads.weights[1] += np.outer(ga2, h1)
        grads.biases[1] += ga2
        gh1 = self.weights[1].T @ ga2
        ga1 = gh1 * _activate_grad(self.activation, a1)
        grads.weights[0] += np.outer(ga1, x)
        grads.biases[0] += ga1
        return self.weights[0].T @ ga1

    def sgd_step(self, grads: "NetGrads", learning_rate: float) -> None:
        for k in range(3):
            self.weights[k] -= learning_rate * grads.weights[k]
            self.biases[k] -= learning_rate * grads.biases[k]


@dataclass
class NetGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: ProjectionNet) -> "NetGrads":
        return cls(
            weights=[np.zeros_like(w) for w in net.weights],
            biases=[np.zeros_like(b) for b in net.biases],
        )


class TokenLikelihoodHead(Protocol):
    """Frozen next-token model over the projected embedding (the generator stand-in).

    ``next_token_probs`` returns one probability row over the vocabulary given
    the embedding and a token prefix. ``log_likelihood_grad`` returns the
    summed log-likelihood of a target sequence together with its gradient with
    respect to the embedding (the head's own parameters stay frozen).
    """

    vocab_size: int

    def next_token_probs(self, embedding: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
        ...

    def log_likelihood_grad(
        self, embedding: np.ndarray, targets: Sequence[int]
    ) -> tuple[float, np.ndarray]:
        ...


@dataclass
class TrainBatch:
    """User/item ordinal pairs with their target explanation token sequences."""

    pairs: list[tuple[int, int]]
    targets: list[list[int]]

    def __post_init__(self) -> None:
        if len(self.pairs) != len(self.targets):
            raise GcnError("pairs and targets length mismatch")
        if not self.pairs:
            raise GcnError("empty training batch")
        for k, tokens in enumerate(self.targets):
            if len(tokens) < 1:
                raise GcnError(f"pair {k}: empty target sequence")

    @property
    def size(self) -> int:
        return len(self.pairs)


@dataclass
class GcnConfig:
    d_gcn: int = 32
    d_llm: int = 64
    hidden: int = 256
    layers: int = 2
    learning_rate: float = 1e-3
    epochs: int = 1
    seed: int = 0
    per_token_normalization: bool = False
    activation: str = "relu"


# ---------------------------------------------------------------------------
# propagation


def propagate_layer(
    graph: InteractionGraph, users: np.ndarray, items: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """One propagation step over the bipartite graph; inputs are not modified."""
    users = np.asarray(users, dtype=np.float64)
    items = np.asarray(items, dtype=np.float64)
    if users.shape[0] != graph.num_users or items.shape[0] != graph.num_items:
        raise GcnError(
            f"row counts ({users.shape[0]}, {items.shape[0]}) do not match graph "
            f"({graph.num_users}, {graph.num_items})"
        )
    if users.shape[1] != items.shape[1]:
        raise GcnError("user and item embedding widths differ")
    if (graph.user_degrees < 1).any() or (graph.item_degrees < 1).any():
        raise GcnError("graph contains a zero-degree node")
    eu, ei = graph.edge_users, graph.edge_items
    coef = 1.0 / np.sqrt(graph.user_degrees[eu] * graph.item_degrees[ei])
    next_users = np.zeros_like(users)
    next_items = np.zeros_like(items)
    np.add.at(next_users, eu, items[ei] * coef[:, None])
    np.add.at(next_items, ei, users[eu] * coef[:, None])
    return next_users, next_items


def aggregate_layers(per_layer: Sequence[np.ndarray], layers: int) -> np.ndarray:
    """Mean of the layers+1 matrices (layer 0 through layer L)."""
    if len(per_layer) != layers + 1:
        raise GcnError(f"expected {layers + 1} matrices, got {len(per_layer)}")
    stacked = [np.asarray(m, dtype=np.float64) for m in per_layer]
    shape = stacked[0].shape
    for k, m in enumerate(stacked):
        if m.shape != shape:
            raise GcnError(f"layer {k} shape {m.shape} != layer 0 shape {shape}")
    return sum(stacked) / float(layers + 1)


def propagate_and_aggregate(
    graph: InteractionGraph, users: np.ndarray, items: np.ndarray, layers: int
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``layers`` propagation steps and average all layer outputs.

    The combined operator is a symmetric matrix over the stacked user/item
    rows, which is also why gradients flow back through this exact function.
    """
    user_levels = [np.asarray(users, dtype=np.float64)]
    item_levels = [np.asarray(items, dtype=np.float64)]
    for _ in range(layers):
        u_next, i_next = propagate_layer(graph, user_levels[-1], item_levels[-1])
        user_levels.append(u_next)
        item_levels.append(i_next)
    return aggregate_layers(user_levels, layers), aggregate_layers(item_levels, layers)


def project(net: ProjectionNet, row: np.ndarray) -> np.ndarray:
    """Deterministic forward pass of one embedding row through the projection."""
    out = net.forward(row)
    if not np.isfinite(out).all():
        raise GcnError("projection produced non-finite output")
    return out


# ---------------------------------------------------------------------------
# loss and training


def nll_loss(
    predictions: Sequence[np.ndarray],
    batch: TrainBatch,
    *,
    per_token_normalization: bool = False,
) -> float:
    """Negative log-likelihood over a batch of per-pair probability rows.

    ``predictions[i]`` holds one probability row per target position of pair i
    (shape C_i x V). Only the target token's probability contributes at each
    position, and the inner sum over positions is NOT divided by C_i unless
    ``per_token_normalization`` is set.
    """
    if len(predictions) != batch.size:
        raise GcnError("predictions/batch size mismatch")
    total = 0.0
    for i, (rows, targets) in enumerate(zip(predictions, batch.targets)):
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != len(targets):
            raise GcnError(f"pair {i}: expected {len(targets)} probability rows")
        if (np.asarray(targets) >= rows.shape[1]).any():
            raise GcnError(f"pair {i}: target token id out of vocabulary")
        picked = rows[np.arange(len(targets)), targets]
        if (picked <= 0.0).any():
            c = int(np.argmax(picked <= 0.0))
            raise GcnError(
                f"zero probability at pair {i}, position {c}; floor probabilities first"
            )
        term = -np.log(picked).sum()
        if per_token_normalization:
            term /= len(targets)
        total += term
    return float(total / batch.size)


def nll_forward_backward(
    users_final: np.ndarray,
    items_final: np.ndarray,
    net: ProjectionNet,
    head: TokenLikelihoodHead,
    batch: TrainBatch,
    *,
    per_token_normalization: bool = False,
) -> tuple[float, NetGrads, np.ndarray, np.ndarray]:
    """Batch loss plus analytic gradients wrt the net and the final embeddings.

    Each pair's generator input is the sum of the projected user row and the
    projected item row, so gradients reach both tables.
    """
    grads = NetGrads.zeros_like(net)
    grad_users = np.zeros_like(users_final)
    grad_items = np.zeros_like(items_final)
    loss = 0.0
    for (u, i), targets in zip(batch.pairs, batch.targets):
        weight = 1.0 / batch.size
        if per_token_normalization:
            weight /= len(targets)
        proj_u, cache_u = net.forward_cached(users_final[u])
        proj_i, cache_i = net.forward_cached(items_final[i])
        loglik, grad_embedding = head.log_likelihood_grad(proj_u + proj_i, targets)
        loss += -loglik * weight
        grad_z = -weight * grad_embedding
        grad_users[u] += net.backward(cache_u, grad_z, grads)
        grad_items[i] += net.backward(cache_i, grad_z, grads)
    return float(loss), grads, grad_users, grad_items


def init_state(graph: InteractionGraph, config: GcnConfig) -> tuple[EmbeddingTable, ProjectionNet]:
    """Seeded initial state: N(0, 0.01) embeddings, fan-in uniform projection."""
    rng = np.random.default_rng(config.seed)
    users = rng.normal(0.0, 0.01, size=(graph.num_users, config.d_gcn))
    items = rng.normal(0.0, 0.01, size=(graph.num_items, config.d_gcn))
    net = ProjectionNet.create(
        config.d_gcn, config.d_llm, config.hidden, rng=rng, activation=config.activation
    )
    return EmbeddingTable(users=users, items=items, layers=config.layers), net


def training_loss(
    graph: InteractionGraph,
    table: EmbeddingTable,
    net: ProjectionNet,
    head: TokenLikelihoodHead,
    batches: Sequence[TrainBatch],
    *,
    per_token_normalization: bool = False,
) -> float:
    """Mean NLL over the given batches with full propagation, no updates."""
    users_final, items_final = propagate_and_aggregate(
        graph, table.users, table.items, table.layers
    )
    losses = []
    for batch in batches:
        loss, _, _, _ = nll_forward_backward(
            users_final, items_final, net, head, batch,
            per_token_normalization=per_token_normalization,
        )
        losses.append(loss)
    return float(np.mean(losses))


def train_adaptor(
    graph: InteractionGraph,
    head: TokenLikelihoodHead,
    batches: Sequence[TrainBatch],
    config: GcnConfig,
) -> tuple[EmbeddingTable, ProjectionNet]:
    """Plain SGD on the embedding tables and projection; the head stays frozen.

    Propagation is recomputed from the level-0 tables every step, and the
    gradient flows back through it using the fact that the propagation plus
    layer-averaging operator is symmetric.
    """
    for batch in batches:
        for targets in batch.targets:
            if max(targets) >= head.vocab_size:
                raise GcnError(f"target token id {max(targets)} >= vocab {head.vocab_size}")
    table, net = init_state(graph, config)
    for epoch in range(config.epochs):
        for batch_no, batch in enumerate(batches):
            users_final, items_final = propagate_and_aggregate(
                graph, table.users, table.items, table.layers
            )
            loss, grads, grad_users, grad_items = nll_forward_backward(
                users_final, items_final, net, head, batch,
                per_token_normalization=config.per_token_normalization,
            )
            if not np.isfinite(loss):
                raise GcnError(
                    f"NaN loss at epoch {epoch}, batch {batch_no}; "
                    f"lower the learning rate (currently {config.learning_rate})"
                )
            grad_u0, grad_i0 = propagate_and_aggregate(
                graph, grad_users, grad_items, table.layers
            )
            table.users -= config.learning_rate * grad_u0
            table.items -= config.learning_rate * grad_i0
            net.sgd_step(grads, config.learning_rate)
    return table, net


# ---------------------------------------------------------------------------
# checkpoint file (magic "RXGE")

_MAGIC = b"RXGE"
_VERSION = 1


def save_checkpoint(path: str | Path, table: EmbeddingTable, net: ProjectionNet) -> None:
    """Binary checkpoint: header then row-major float32 LE parameter blocks."""
    if net.d_in != table.dim:
        raise GcnError("projection input width does not match embedding width")
    parts = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<III", table.dim, net.d_out, table.layers),
        struct.pack("<QQ", table.users.shape[0], table.items.shape[0]),
    ]
    blocks = [table.users, table.items]
    for k in range(3):
        blocks.append(net.weights[k])
        blocks.append(net.biases[k])
    for block in blocks:
        parts.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[EmbeddingTable, ProjectionNet]:
    """Parse the checkpoint; the hidden width is recovered from the file size."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise GcnError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise GcnError(f"{path}: unsupported checkpoint version {version}")
    d_gcn, d_llm, layers = struct.unpack_from("<III", raw, 8)
    n_users, n_items = struct.unpack_from("<QQ", raw, 20)
    offset = 36
    floats = np.frombuffer(raw, dtype="<f4", offset=offset)
    table_count = (n_users + n_items) * d_gcn
    remaining = floats.size - table_count
    # remaining = h*d_gcn + h + h*h + h + d_llm*h + d_llm  =>  quadratic in h
    b_coef = d_gcn + d_llm + 2
    disc = b_coef * b_coef - 4 * (d_llm - remaining)
    hidden = int(round((-b_coef + np.sqrt(disc)) / 2.0))
    if hidden <= 0 or hidden * (hidden + b_coef) + d_llm != remaining:
        raise GcnError(f"{path}: truncated or inconsistent parameter block")
    cursor = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal cursor
        count = int(np.prod(shape))
        block = floats[cursor : cursor + count].astype(np.float64).reshape(shape)
        cursor += count
        return block

    users = take((int(n_users), d_gcn))
    items = take((int(n_items), d_gcn))
    weights, biases = [], []
    for n_out, n_in in [(hidden, d_gcn), (hidden, hidden), (d_llm, hidden)]:
        weights.append(take((n_out, n_in)))
        biases.append(take((n_out,)))
    table = EmbeddingTable(users=users, items=items, layers=int(layers))
    net = ProjectionNet(weights=weights, biases=biases)
    return table, net

"""Per-client two-layer GCN and its local training loop.

The backbone is GCN layer 1 (weight + bias) and is what the server
generates; the head is GCN layer 2 and never leaves the client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import GraphShard

__all__ = [
    "ClientParams",
    "ClientState",
    "LocalResult",
    "normalized_adjacency",
    "init_params",
    "backbone_size",
    "gcn_forward",
    "local_train",
    "mean_pool",
    "embed",
    "evaluate",
    "evaluate_loss",
]


@dataclass
class ClientParams:
    w1: np.ndarray  # f x h
    b1: np.ndarray  # h
    w2: np.ndarray  # h x C
    b2: np.ndarray  # C

    @property
    def backbone(self) -> np.ndarray:
        return np.concatenate([self.w1.reshape(-1), self.b1])

    @property
    def head(self) -> np.ndarray:
        return np.concatenate([self.w2.reshape(-1), self.b2])

    def pack(self) -> np.ndarray:
        return np.concatenate([self.backbone, self.head])

    @classmethod
    def unpack(cls, flat: np.ndarray, f: int, h: int, c: int) -> ClientParams:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != backbone_size(f, h) + h * c + c:
            raise ValueError("flat parameter vector has the wrong length")
        bb, hd = np.split(flat, [backbone_size(f, h)])
        w1, b1 = unpack_backbone(bb, f, h)
        return cls(w1, b1, hd[: h * c].reshape(h, c).copy(), hd[h * c :].copy())

    def with_backbone(self, flat: np.ndarray) -> ClientParams:
        f, h = self.w1.shape
        w1, b1 = unpack_backbone(flat, f, h)
        return ClientParams(w1, b1, self.w2.copy(), self.b2.copy())

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> ClientParams:
        return ClientParams(*(a.copy() for a in self.arrays()))


def backbone_size(f: int, h: int) -> int:
    return f * h + h


def unpack_backbone(flat: np.ndarray, f: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size != backbone_size(f, h):
        raise ValueError(f"backbone vector length {flat.size} != {backbone_size(f, h)}")
    return flat[: f * h].reshape(f, h).copy(), flat[f * h :].copy()


def init_params(f: int, h: int, c: int, rng: np.random.Generator) -> ClientParams:
    """Glorot-uniform weights, zero biases."""

    def glorot(a, b):
        lim = np.sqrt(6.0 / (a + b))
        return rng.uniform(-lim, lim, size=(a, b))

    return ClientParams(glorot(f, h), np.zeros(h), glorot(h, c), np.zeros(c))


def normalized_adjacency(shard: GraphShard) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    a = shard.graph.adjacency() + np.eye(shard.num_nodes)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


@dataclass
class ClientState:
    shard: GraphShard
    params: ClientParams
    optimizer: object
    adj: np.ndarray = field(default=None)
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if self.adj is None:
            self.adj = normalized_adjacency(self.shard)
        self._prop = self.adj @ self.shard.graph.features

    @property
    def propagated_features(self) -> np.ndarray:
        return self._prop


def gcn_forward(shard_or_state, params, dropout: float = 0.0, rng=None):
    """Returns (hidden, logits) tensors.

    `params` may be a ClientParams (evaluated as constants) or a sequence of
    four Tensors (w1, b1, w2, b2) to differentiate through.
    """
    if isinstance(shard_or_state, ClientState):
        adj, prop = shard_or_state.adj, shard_or_state.propagated_features
    else:
        adj = normalized_adjacency(shard_or_state)
        prop = adj @ shard_or_state.graph.features
    if isinstance(params, ClientParams):
        w1, b1, w2, b2 = (ad.constant(a) for a in params.arrays())
    else:
        w1, b1, w2, b2 = params
    if prop.shape[1] != w1.shape[0]:
        raise ValueError(f"feature width {prop.shape[1]} does not match backbone input {w1.shape[0]}")
    hidden = ad.relu(ad.matmul(ad.constant(prop), w1) + b1)
    dropped = ad.dropout(hidden, dropout, rng)
    logits = ad.matmul(ad.constant(adj), ad.matmul(dropped, w2)) + b2
    return hidden, logits


def mean_pool(hidden) -> np.ndarray:
    arr = hidden.data if isinstance(hidden, ad.Tensor) else np.asarray(hidden, dtype=np.float64)
    if arr.shape[0] == 0:
        raise ValueError("cannot pool an empty node set")
    return arr.mean(axis=0)


def embed(state: ClientState, params: ClientParams | None = None) -> np.ndarray:
    hidden, _ = gcn_forward(state, params or state.params)
    return mean_pool(hidden)


@dataclass
class LocalResult:
    params: ClientParams
    delta_backbone: np.ndarray
    embedding: np.ndarray
    losses: list[float]


def local_train(
    state: ClientState,
    backbone_in: np.ndarray | None,
    epochs: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    train_backbone: bool = True,
) -> LocalResult:
    """Full-batch training on the train mask, starting from `backbone_in`
    (or the current backbone when None) and the persisted head.

    Mutates `state.params`, the optimizer state and the cached embedding.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    train = state.shard.train_mask
    if train is None or not train.any():
        raise ValueError(f"client {state.shard.client_id} has an empty train mask")
    start = state.params if backbone_in is None else state.params.with_backbone(backbone_in)
    sent_backbone = start.backbone
    arrays = start.arrays()
    labels = state.shard.graph.labels
    losses = []
    for _ in range(epochs):
        leaves = [ad.tensor(a) for a in arrays]
        _, logits = gcn_forward(state, leaves, dropout=dropout, rng=rng)
        loss = ad.cross_entropy(logits, labels, train)
        losses.append(float(loss.data))
        grads = ad.grad(loss, leaves)
        if not train_backbone:
            grads[0] = np.zeros_like(grads[0])
            grads[1] = np.zeros_like(grads[1])
        arrays = state.optimizer.step(arrays, grads)
        if not train_backbone:
            arrays[0], arrays[1] = start.w1, start.b1
    state.params = ClientParams(*arrays)
    state.embedding = embed(state)
    return LocalResult(
        params=state.params,
        delta_backbone=state.params.backbone - sent_backbone,
        embedding=state.embedding,
        losses=losses,
    )


def predictions(state: ClientState, params: ClientParams | None = None) -> np.ndarray:
    _, logits = gcn_forward(state, params or state.params)
    # np.argmax returns the first maximal index: ties go to the lowest class
    return np.argmax(logits.data, axis=1)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not np.any(mask):
        raise ValueError("accuracy over an empty mask")
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == labels[mask]))


def evaluate(state: ClientState, mask, params: ClientParams | None = None) -> float:
    """Argmax accuracy over the masked nodes."""
    if isinstance(mask, str):
        mask = state.shard.mask(mask)
    _, logits = gcn_forward(state, params or state.params)
    return accuracy_from_logits(logits.data, state.shard.graph.labels, np.asarray(mask, dtype=bool))


def evaluate_loss(state: ClientState, mask, params: ClientParams | None = None) -> float:
    if isinstance(mask, str):
        mask = state.shard.mask(mask)
    _, logits = gcn_forward(state, params or state.params)
    return float(ad.cross_entropy(logits, state.shard.graph.labels, mask).data)

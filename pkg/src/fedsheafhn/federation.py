"""Communication loop for FedSheafHN, the local-only and FedAvg baselines,
new-client onboarding and malicious-embedding injection."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .client import (
    ClientParams,
    ClientState,
    LocalResult,
    backbone_size,
    evaluate,
    evaluate_loss,
    init_params,
    local_train,
)
from .config import VARIANTS, RunConfig
from .graphs import GraphShard
from .hypernet import HyperNet, generate, server_surrogate_loss
from .params import ParamSet, glorot
from .sheaf import CollaborationGraph, SheafStack, attach_node, diffuse, knn_graph

log = logging.getLogger(__name__)

__all__ = [
    "RoundReport",
    "FedSheafHN",
    "ServerState",
    "RoundError",
    "run_fedsheafhn",
    "run_local_only",
    "run_fedavg",
    "run_ablation",
    "add_new_clients",
    "inject_malicious",
    "onehot_embeddings",
]

SPLITS = ("train", "val", "test")

# stream tags for per-purpose RNG derivation: default_rng([seed, tag, ...])
_INIT, _DROPOUT, _ATTACK, _NEW, _SERVER_INIT = 1, 2, 3, 4, 5


class RoundError(RuntimeError):
    def __init__(self, round_idx: int, exc: Exception):
        super().__init__(f"round {round_idx}: {type(exc).__name__}: {exc}")
        self.round = round_idx


@dataclass
class RoundReport:
    round: int
    accuracy: dict[str, np.ndarray]
    loss: dict[str, np.ndarray]
    surrogate_loss: float = float("nan")
    grad_norm_sq: float = float("nan")
    wall_time: float = 0.0
    malicious: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def federated_accuracy(self) -> float:
        return float(np.mean(self.accuracy["test"]))

    @property
    def client_std(self) -> float:
        return float(np.std(self.accuracy["test"]))

    def benign_accuracy(self) -> float:
        keep = np.ones(self.accuracy["test"].size, dtype=bool)
        keep[self.malicious] = False
        return float(np.mean(self.accuracy["test"][keep]))


def inject_malicious(embeddings: np.ndarray, ratio: float, kind: str, tau: float, seed) -> np.ndarray:
    """Replace the floor(ratio * N) lowest-index rows with attack vectors.

    same_value: a * ones with a ~ N(0, tau^2); gaussian: N(0, tau^2 I).
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    out = np.array(embeddings, dtype=np.float64, copy=True)
    count = int(math.floor(ratio * out.shape[0] + 1e-9))
    if count == 0:
        return out
    rng = np.random.default_rng(seed)
    h = out.shape[1]
    if kind == "same_value":
        out[:count] = tau * rng.standard_normal((count, 1)) * np.ones((1, h))
    elif kind == "gaussian":
        out[:count] = tau * rng.standard_normal((count, h))
    else:
        raise ValueError(f"unknown attack kind {kind!r}")
    return out


def malicious_count(ratio: float, n: int) -> int:
    return int(math.floor(ratio * n + 1e-9))


def onehot_embeddings(n: int, h: int) -> np.ndarray:
    if n > h:
        raise ValueError(f"one-hot client ids need hidden >= clients ({h} < {n})")
    return np.eye(n, h)


def _client_threads(cfg: RunConfig) -> int:
    cap = os.environ.get("FSHN_THREADS")
    threads = cfg.threads
    if cap:
        threads = min(threads, max(1, int(cap)))
    return threads


def _make_clients(shards: list[GraphShard], cfg: RunConfig, tag: int = _INIT) -> list[ClientState]:
    clients = []
    for shard in shards:
        g = shard.graph
        rng = np.random.default_rng([cfg.seed, tag, shard.client_id])
        params = init_params(g.num_features, cfg.hidden, g.num_classes, rng)
        opt = ad.make_optimizer(cfg.client_optimizer, cfg.client_lr, cfg.client_weight_decay)
        clients.append(ClientState(shard=shard, params=params, optimizer=opt))
    return clients


def _evaluate_all(clients: list[ClientState]) -> tuple[dict, dict]:
    acc = {s: np.array([evaluate(c, s) for c in clients]) for s in SPLITS}
    loss = {s: np.array([evaluate_loss(c, s) for c in clients]) for s in SPLITS}
    return acc, loss


def _check_shards(shards: list[GraphShard]) -> None:
    if not shards:
        raise ValueError("at least one client shard is required")
    f = {s.graph.num_features for s in shards}
    c = {s.graph.num_classes for s in shards}
    if len(f) != 1 or len(c) != 1:
        raise ValueError("all shards must share feature width and class count")
    for s in shards:
        if s.train_mask is None:
            raise ValueError(f"shard {s.client_id} has no train/val/test masks")


def _client_state_arrays(clients: list[ClientState]) -> dict[str, np.ndarray]:
    out = {}
    for i, c in enumerate(clients):
        for name, a in zip(("w1", "b1", "w2", "b2"), c.params.arrays()):
            out[f"client{i}.{name}"] = a
        for k, v in c.optimizer.state_arrays().items():
            out[f"client{i}.opt.{k}"] = v
        if c.embedding is not None:
            out[f"client{i}.embedding"] = c.embedding
    return out


def _load_client_arrays(clients: list[ClientState], arrays: dict[str, np.ndarray]) -> None:
    for i, c in enumerate(clients):
        try:
            c.params = ClientParams(*(np.array(arrays[f"client{i}.{n}"]) for n in ("w1", "b1", "w2", "b2")))
        except KeyError as exc:
            raise ValueError(f"checkpoint is missing parameters for client {i}") from exc
        prefix = f"client{i}.opt."
        c.optimizer.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        c.embedding = arrays.get(f"client{i}.embedding")


def _prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def _check_meta(meta: dict, kind: str, n: int) -> None:
    if meta.get("kind") != kind:
        raise ValueError(f"checkpoint holds a {meta.get('kind')!r} run, expected {kind!r}")
    if meta.get("num_clients") != n:
        raise ValueError(f"checkpoint has {meta.get('num_clients')} clients, config has {n}")


class _ClientPhase:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.threads = _client_threads(cfg)

    def run(self, clients: list[ClientState], backbones, round_idx: int) -> list[LocalResult]:
        cfg = self.cfg

        def work(i: int) -> LocalResult:
            c = clients[i]
            rng = None
            if cfg.client_dropout > 0:
                # round_idx is -1 for the initial update
                rng = np.random.default_rng([cfg.seed, _DROPOUT, round_idx + 1, c.shard.client_id])
            bb = None if backbones is None else backbones[i]
            return local_train(c, bb, cfg.local_epochs, dropout=cfg.client_dropout, rng=rng)

        if self.threads <= 1 or len(clients) == 1:
            return [work(i) for i in range(len(clients))]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            # map preserves submission order: deterministic join
            return list(pool.map(work, range(len(clients))))


# ------------------------------------------------------------------ FedSheafHN


class GCNCollab:
    """Two-layer GCN on the collaboration graph (replaces the sheaf stack)."""

    def __init__(self, h: int, rng):
        self.params = ParamSet({"gcn_w1": glorot(rng, h, h), "gcn_w2": glorot(rng, h, h)})

    @staticmethod
    def forward(graph: CollaborationGraph, p: dict, x: ad.Tensor) -> ad.Tensor:
        a = graph.adjacency() + np.eye(graph.num_nodes)
        dinv = 1.0 / np.sqrt(a.sum(axis=1))
        a_hat = ad.constant(a * dinv[:, None] * dinv[None, :])
        hid = ad.elu(ad.matmul(ad.matmul(a_hat, x), p["gcn_w1"]))
        return ad.matmul(ad.matmul(a_hat, hid), p["gcn_w2"])


def _mean_collab(graph: CollaborationGraph, x: ad.Tensor) -> ad.Tensor:
    """Closed-neighbourhood mean of client embeddings (parameter free)."""
    a = graph.adjacency() + np.eye(graph.num_nodes)
    return ad.matmul(ad.constant(a / a.sum(axis=1, keepdims=True)), x)


@dataclass
class ServerState:
    theta: ParamSet
    hn: HyperNet
    stack: SheafStack | None
    opt_theta: object
    opt_phi: object
    graph: CollaborationGraph | None = None
    x0: np.ndarray | None = None
    round: int = 0

    @property
    def phi(self) -> ParamSet:
        return self.hn.params


class FedSheafHN:
    """Stateful simulation of the FedSheafHN loop.

    Each call to :meth:`step` runs one communication round: optional
    collaboration-graph refresh, diffusion, hypernetwork generation, client
    local training, then one server update of (theta, phi) from the backbone
    deltas.
    """

    def __init__(self, shards: list[GraphShard], cfg: RunConfig, variant: str | None = None):
        _check_shards(shards)
        variant = variant or cfg.variant
        if variant != "full" and variant not in VARIANTS:
            raise ValueError(f"unknown ablation variant {variant!r}")
        self.cfg = cfg
        self.variant = variant
        self.shards = shards
        self.clients = _make_clients(shards, cfg)
        self.phase = _ClientPhase(cfg)
        g0 = shards[0].graph
        self.f, self.num_classes = g0.num_features, g0.num_classes
        self.P = backbone_size(self.f, cfg.hidden)
        n = len(shards)
        if variant == "onehot_hn":
            onehot_embeddings(n, cfg.hidden)

        rng = np.random.default_rng([cfg.seed, _SERVER_INIT])
        stack = SheafStack(cfg.hidden, cfg.stalk_dim, cfg.sheaf_layers, cfg.map_hidden, rng=rng)
        hn = HyperNet(cfg.hidden, self.P, hidden=cfg.hn_hidden, dropout=cfg.hn_dropout,
                      use_attention=variant not in ("no_attention", "onehot_hn"), rng=rng)
        if variant == "gcn_collab":
            theta = GCNCollab(cfg.hidden, rng).params
        elif variant in ("no_sheaf", "onehot_hn", "mean_collab"):
            theta = ParamSet()
        else:
            theta = stack.params
        self.server = ServerState(
            theta=theta,
            hn=hn,
            stack=stack if theta is stack.params else None,
            opt_theta=self._server_optimizer(cfg.sheaf_lr, cfg.sheaf_weight_decay),
            opt_phi=self._server_optimizer(cfg.hn_lr, 0.0),
        )
        self.pending_embeddings: np.ndarray | None = None
        self.initialized = False
        self.malicious = np.arange(malicious_count(cfg.attack_ratio, n))
        self.reports: list[RoundReport] = []

    def _server_optimizer(self, lr: float, wd: float):
        return ad.make_optimizer(self.cfg.server_optimizer, lr, wd)

    # -- pipeline pieces -------------------------------------------------------

    def initialize(self) -> None:
        """Client-side initial update: local training from the random
        backbone to produce the first graph-level embeddings."""
        results = self.phase.run(self.clients, None, -1)
        self.pending_embeddings = np.stack([r.embedding for r in results])
        self.initialized = True

    def is_refresh(self, r: int) -> bool:
        if self.variant == "static_embedding":
            return r == 0
        return r % self.cfg.refresh_interval == 0

    def _received_embeddings(self, r: int) -> np.ndarray:
        n = len(self.clients)
        if self.variant == "onehot_hn":
            return onehot_embeddings(n, self.cfg.hidden)
        x = self.pending_embeddings
        if self.cfg.attack_ratio > 0:
            x = inject_malicious(x, self.cfg.attack_ratio, self.cfg.attack_kind, self.cfg.attack_tau,
                                 [self.cfg.seed, _ATTACK, r])
        return x

    def enrich(self, graph: CollaborationGraph, theta: dict) -> ad.Tensor:
        x = ad.constant(graph.x0)
        if self.variant in ("no_sheaf", "onehot_hn"):
            return x
        if self.variant == "mean_collab":
            return _mean_collab(graph, x)
        if self.variant == "gcn_collab":
            return GCNCollab.forward(graph, theta, x)
        return diffuse(graph, self.server.stack, theta, x)

    def forward(self, graph: CollaborationGraph, theta: dict, phi: dict, rng=None) -> ad.Tensor:
        return generate(self.enrich(graph, theta), self.server.hn, phi, rng=rng)

    def step(self) -> RoundReport:
        cfg, server = self.cfg, self.server
        r = server.round
        start = time.perf_counter()
        try:
            if not self.initialized:
                self.initialize()
            refresh = self.is_refresh(r)
            if refresh or server.graph is None:
                server.x0 = self._received_embeddings(r)
                n = server.x0.shape[0]
                if n >= 2:
                    server.graph = knn_graph(server.x0, cfg.k_for(n))
                else:
                    server.graph = CollaborationGraph(1, np.zeros((0, 2), dtype=np.int64), server.x0.copy())
            theta = server.theta.leaves()
            phi = server.phi.leaves()
            dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT, r, 10**6])
            omega = self.forward(server.graph, theta, phi, rng=dropout_rng)

            results = self.phase.run(self.clients, omega.data, r)
            if refresh:
                self.pending_embeddings = np.stack([res.embedding for res in results])
            delta = np.stack([res.delta_backbone for res in results])

            # descend along J^T (omega_s - omega_c): pulls generated backbones
            # toward the locally trained ones
            loss = server_surrogate_loss(omega, -delta)
            leaves = list(theta.values()) + list(phi.values())
            grads = ad.grad(loss, leaves)
            g_theta, g_phi = grads[: len(theta)], grads[len(theta) :]
            norm_sq = float(sum(np.sum(g * g) for g in grads))
            if len(theta):
                server.theta.assign(server.opt_theta.step(server.theta.values(), g_theta))
            server.phi.assign(server.opt_phi.step(server.phi.values(), g_phi))
            acc, losses = _evaluate_all(self.clients)
        except Exception as exc:
            raise RoundError(r, exc) from exc
        server.round += 1
        report = RoundReport(r, acc, losses, float(loss.data), norm_sq, time.perf_counter() - start,
                             malicious=self.malicious)
        self.reports.append(report)
        log.debug("round %d fed-acc %.4f grad2 %.3e", r, report.federated_accuracy, norm_sq)
        return report

    def run(self, rounds: int | None = None) -> list[RoundReport]:
        rounds = self.cfg.rounds if rounds is None else rounds
        return [self.step() for _ in range(rounds)]

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        """(metadata, named arrays) sufficient to resume bit-identically."""
        server = self.server
        arrays = {f"theta.{k}": v for k, v in server.theta.arrays.items()}
        arrays.update({f"phi.{k}": v for k, v in server.phi.arrays.items()})
        arrays.update({f"opt_theta.{k}": v for k, v in server.opt_theta.state_arrays().items()})
        arrays.update({f"opt_phi.{k}": v for k, v in server.opt_phi.state_arrays().items()})
        if server.graph is not None:
            arrays["graph.edges"] = server.graph.edges.astype(np.float64).reshape(-1, 2)
            arrays["graph.x0"] = server.graph.x0
            arrays["x0"] = server.x0
        if self.pending_embeddings is not None:
            arrays["pending_embeddings"] = self.pending_embeddings
        arrays.update(_client_state_arrays(self.clients))
        meta = {"kind": "fedsheafhn", "variant": self.variant, "round": server.round,
                "initialized": self.initialized, "num_clients": len(self.clients)}
        return meta, arrays

    def load_state_arrays(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        if meta.get("kind") != "fedsheafhn" or meta.get("variant") != self.variant:
            raise ValueError(f"checkpoint holds {meta.get('kind')}/{meta.get('variant')}, "
                             f"expected fedsheafhn/{self.variant}")
        if meta.get("num_clients") != len(self.clients):
            raise ValueError(f"checkpoint has {meta.get('num_clients')} clients, config has {len(self.clients)}")
        server = self.server
        for prefix, params in (("theta.", server.theta), ("phi.", server.phi)):
            stored = _prefixed(prefix, arrays)
            if sorted(stored) != sorted(params.names()):
                raise ValueError(f"checkpoint {prefix[:-1]} tensors do not match the model")
            for name in params.names():
                if stored[name].shape != params[name].shape:
                    raise ValueError(f"shape mismatch for {prefix}{name}")
                params[name] = stored[name]
        server.opt_theta.load_state_arrays(_prefixed("opt_theta.", arrays))
        server.opt_phi.load_state_arrays(_prefixed("opt_phi.", arrays))
        if "graph.edges" in arrays:
            x0 = np.array(arrays["graph.x0"])
            edges = np.asarray(arrays["graph.edges"], dtype=np.int64).reshape(-1, 2)
            server.graph = CollaborationGraph(x0.shape[0], edges, x0)
            server.x0 = np.array(arrays["x0"])
        else:
            server.graph, server.x0 = None, None
        self.pending_embeddings = arrays.get("pending_embeddings")
        _load_client_arrays(self.clients, arrays)
        server.round = int(meta["round"])
        self.initialized = bool(meta["initialized"])

    def generated_backbones(self) -> np.ndarray:
        """Current generator output with dropout disabled."""
        return self.forward(self.server.graph, self.server.theta.constants(), self.server.phi.constants()).data


def run_fedsheafhn(shards: list[GraphShard], cfg: RunConfig) -> list[RoundReport]:
    return FedSheafHN(shards, cfg, variant="full").run()


def run_ablation(shards: list[GraphShard], cfg: RunConfig, variant: str) -> list[RoundReport]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return FedSheafHN(shards, cfg, variant=variant).run()


# ------------------------------------------------------------------- baselines


class LocalOnly:
    """Every client trains alone; one report per T_c-epoch block."""

    def __init__(self, shards: list[GraphShard], cfg: RunConfig):
        _check_shards(shards)
        self.cfg = cfg
        self.clients = _make_clients(shards, cfg)
        self.phase = _ClientPhase(cfg)
        self.round = 0
        self.reports: list[RoundReport] = []

    def step(self) -> RoundReport:
        r = self.round
        start = time.perf_counter()
        try:
            self.phase.run(self.clients, None, r)
            acc, losses = _evaluate_all(self.clients)
        except Exception as exc:
            raise RoundError(r, exc) from exc
        self.round += 1
        report = RoundReport(r, acc, losses, wall_time=time.perf_counter() - start)
        self.reports.append(report)
        return report

    def run(self, rounds: int | None = None) -> list[RoundReport]:
        rounds = self.cfg.rounds if rounds is None else rounds
        return [self.step() for _ in range(rounds)]

    def state_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        return {"kind": "local", "round": self.round, "num_clients": len(self.clients)}, _client_state_arrays(self.clients)

    def load_state_arrays(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        _check_meta(meta, "local", len(self.clients))
        _load_client_arrays(self.clients, arrays)
        self.round = int(meta["round"])


def weighted_average(params: list[ClientParams], weights) -> ClientParams:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    arrays = [sum(wi * p.arrays()[k] for wi, p in zip(w, params)) for k in range(4)]
    return ClientParams(*arrays)


class FedAvg:
    """Clients start each round from the global model; the server replaces
    it with the node-count-weighted mean of the trained client models."""

    def __init__(self, shards: list[GraphShard], cfg: RunConfig):
        _check_shards(shards)
        self.cfg = cfg
        self.clients = _make_clients(shards, cfg)
        self.phase = _ClientPhase(cfg)
        g0 = shards[0].graph
        rng = np.random.default_rng([cfg.seed, _SERVER_INIT])
        self.global_params = init_params(g0.num_features, cfg.hidden, g0.num_classes, rng)
        self.weights = np.array([s.num_nodes for s in shards], dtype=np.float64)
        self.round = 0
        self.reports: list[RoundReport] = []

    def step(self) -> RoundReport:
        r = self.round
        start = time.perf_counter()
        try:
            for c in self.clients:
                c.params = self.global_params.copy()
            self.phase.run(self.clients, None, r)
            acc, losses = _evaluate_all(self.clients)
            self.global_params = weighted_average([c.params for c in self.clients], self.weights)
        except Exception as exc:
            raise RoundError(r, exc) from exc
        self.round += 1
        report = RoundReport(r, acc, losses, wall_time=time.perf_counter() - start)
        self.reports.append(report)
        return report

    def run(self, rounds: int | None = None) -> list[RoundReport]:
        rounds = self.cfg.rounds if rounds is None else rounds
        return [self.step() for _ in range(rounds)]

    def state_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = _client_state_arrays(self.clients)
        for name, a in zip(("w1", "b1", "w2", "b2"), self.global_params.arrays()):
            arrays[f"global.{name}"] = a
        return {"kind": "fedavg", "round": self.round, "num_clients": len(self.clients)}, arrays

    def load_state_arrays(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        _check_meta(meta, "fedavg", len(self.clients))
        _load_client_arrays(self.clients, arrays)
        self.global_params = ClientParams(*(np.array(arrays[f"global.{n}"]) for n in ("w1", "b1", "w2", "b2")))
        self.round = int(meta["round"])


def run_local_only(shards: list[GraphShard], cfg: RunConfig) -> list[RoundReport]:
    return LocalOnly(shards, cfg).run()


def run_fedavg(shards: list[GraphShard], cfg: RunConfig) -> list[RoundReport]:
    return FedAvg(shards, cfg).run()


# ----------------------------------------------------------------- new clients


@dataclass
class NewClientResult:
    client_ids: list[int]
    accuracy: np.ndarray
    backbones: np.ndarray
    embeddings: np.ndarray

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracy))


def generate_for_embeddings(sim: FedSheafHN, new_embeddings: np.ndarray) -> np.ndarray:
    """Attach new clients to the frozen collaboration graph and return their
    generated backbones (dropout off, parameters read as constants)."""
    server = sim.server
    graph = server.graph
    k = sim.cfg.k_for(graph.num_nodes + 1)
    for x in np.atleast_2d(new_embeddings):
        graph = attach_node(graph, x, k)
    omega = sim.forward(graph, server.theta.constants(), server.phi.constants())
    m = np.atleast_2d(new_embeddings).shape[0]
    return omega.data[-m:]


def add_new_clients(sim: FedSheafHN, new_shards: list[GraphShard], epochs: int | None = None) -> NewClientResult:
    """Onboard unseen clients with theta and phi frozen.

    Each new client trains locally once to produce its embedding, receives a
    generated backbone, then trains only its head and is evaluated on its
    test split.
    """
    if sim.server.round < 1 or sim.server.graph is None:
        raise ValueError("the server must be trained for at least one round")
    cfg = sim.cfg
    epochs = epochs or cfg.new_client_epochs or cfg.local_epochs
    theta_before, phi_before = sim.server.theta.copy(), sim.server.phi.copy()

    clients = _make_clients(new_shards, cfg, tag=_NEW)
    first = _ClientPhase(cfg).run(clients, None, -1)
    embeddings = np.stack([res.embedding for res in first])
    backbones = generate_for_embeddings(sim, embeddings)
    accs = []
    for c, bb in zip(clients, backbones):
        local_train(c, bb, epochs, train_backbone=False)
        accs.append(evaluate(c, "test"))

    if not (sim.server.theta.bitwise_equal(theta_before) and sim.server.phi.bitwise_equal(phi_before)):
        raise RuntimeError("server parameters changed while onboarding new clients")
    return NewClientResult([s.client_id for s in new_shards], np.array(accs), backbones, embeddings)

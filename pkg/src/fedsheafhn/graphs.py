"""Graph storage, ingestion, synthetic generation and client partitioning."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "Graph",
    "GraphShard",
    "PartitionSpec",
    "GraphFormatError",
    "load_planetoid",
    "sbm_generate",
    "partition",
    "greedy_partition",
    "random_partition",
    "edge_cut",
    "induced_shard",
    "split_masks",
]


class GraphFormatError(ValueError):
    """Malformed or inconsistent graph input files."""


def _canonical_edges(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= num_nodes):
        raise ValueError("edge endpoint out of range")
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(arr, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph; edges are stored once as (u, v) with u < v."""

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "edges", _canonical_edges(self.edges, self.num_nodes))
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise ValueError("features must be num_nodes x f")
        if labels.shape != (self.num_nodes,):
            raise ValueError("one label per node required")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label index outside [0, num_classes)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            nbrs[u].append(int(v))
            nbrs[v].append(int(u))
        for lst in nbrs:
            lst.sort()
        return nbrs

    def subgraph(self, nodes) -> tuple[Graph, np.ndarray]:
        """Induced subgraph on sorted `nodes`; returns it with the global ids."""
        nodes = np.unique(np.asarray(nodes, dtype=np.int64))
        remap = -np.ones(self.num_nodes, dtype=np.int64)
        remap[nodes] = np.arange(nodes.size)
        keep = (remap[self.edges[:, 0]] >= 0) & (remap[self.edges[:, 1]] >= 0) if len(self.edges) else []
        sub_edges = remap[self.edges[keep]] if len(self.edges) else np.zeros((0, 2), np.int64)
        g = Graph(
            num_nodes=int(nodes.size),
            edges=sub_edges,
            features=self.features[nodes],
            labels=self.labels[nodes],
            num_classes=self.num_classes,
        )
        return g, nodes


@dataclass(frozen=True, eq=False)
class GraphShard:
    client_id: int
    graph: Graph
    global_ids: np.ndarray
    train_mask: np.ndarray = field(default=None)
    val_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def mask(self, split: str) -> np.ndarray:
        return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "non_overlapping"
    num_clients: int = 10
    seed: int = 0
    base_parts: int | None = None
    samples_per_part: int = 5

    def __post_init__(self):
        if self.mode not in ("non_overlapping", "overlapping"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.mode == "overlapping":
            base = self.base_parts if self.base_parts is not None else self.num_clients // self.samples_per_part
            if base < 1 or base * self.samples_per_part != self.num_clients:
                raise ValueError("overlapping mode needs num_clients == base_parts * samples_per_part")
            object.__setattr__(self, "base_parts", base)


# ---------------------------------------------------------------- ingestion


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"missing graph file: {path}")
    with path.open(encoding="utf-8") as fh:
        return [ln for ln in (raw.strip() for raw in fh) if ln]


def _find(directory: Path, names: tuple[str, ...], suffix: str) -> Path:
    for name in names:
        if (directory / name).exists():
            return directory / name
    hits = sorted(directory.glob(f"*{suffix}"))
    return hits[0] if hits else directory / names[0]


def load_planetoid(directory) -> Graph:
    """Read ``nodes.txt`` / ``edges.txt`` (or the raw ``*.content`` /
    ``*.cites`` pair) from `directory`.

    Node lines are ``<id> <features...> <label>``; edge lines are
    ``<id> <id>``.  Node ids are arbitrary tokens mapped to indices in file
    order; labels are mapped to class indices in sorted order.  If a
    ``classes.txt`` file is present it fixes the allowed label set and any
    other label is rejected.
    """
    directory = Path(directory)
    node_path = _find(directory, ("nodes.txt",), ".content")
    edge_path = _find(directory, ("edges.txt",), ".cites")
    node_lines = _read_lines(node_path)
    edge_lines = _read_lines(edge_path)

    ids: dict[str, int] = {}
    feats: list[list[float]] = []
    raw_labels: list[str] = []
    width = None
    for lineno, line in enumerate(node_lines, 1):
        tok = line.split()
        if len(tok) < 2:
            raise GraphFormatError(f"{node_path.name}:{lineno}: expected '<id> <features...> <label>'")
        try:
            row = [float(x) for x in tok[1:-1]]
        except ValueError as exc:
            raise GraphFormatError(f"{node_path.name}:{lineno}: non-numeric feature") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(f"{node_path.name}:{lineno}: expected {width} features, got {len(row)}")
        if tok[0] in ids:
            raise GraphFormatError(f"{node_path.name}:{lineno}: duplicate node id {tok[0]!r}")
        ids[tok[0]] = len(ids)
        feats.append(row)
        raw_labels.append(tok[-1])

    class_file = directory / "classes.txt"
    if class_file.exists():
        classes = _read_lines(class_file)
        unknown = sorted(set(raw_labels) - set(classes))
        if unknown:
            raise GraphFormatError(f"unknown labels: {unknown}")
    else:
        classes = sorted(set(raw_labels))
    class_index = {c: i for i, c in enumerate(classes)}

    edges = []
    for lineno, line in enumerate(edge_lines, 1):
        tok = line.split()
        if len(tok) != 2:
            raise GraphFormatError(f"{edge_path.name}:{lineno}: expected '<id> <id>'")
        try:
            edges.append((ids[tok[0]], ids[tok[1]]))
        except KeyError as exc:
            raise GraphFormatError(f"{edge_path.name}:{lineno}: dangling endpoint {exc.args[0]!r}") from exc

    n = len(ids)
    return Graph(
        num_nodes=n,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
        features=np.array(feats, dtype=np.float64).reshape(n, width or 0),
        labels=np.array([class_index[c] for c in raw_labels], dtype=np.int64),
        num_classes=len(classes),
    )


# ---------------------------------------------------------------- synthetic


def sbm_generate(
    blocks,
    p_in: float,
    p_out: float,
    f: int,
    seed: int,
    signal: float = 1.0,
    noise: float = 1.0,
) -> Graph:
    """Stochastic block model with label = block id.

    Features are ``signal * e_{label mod f}`` plus isotropic Gaussian noise
    of std `noise`.
    """
    blocks = [int(b) for b in blocks]
    if not blocks or min(blocks) <= 0:
        raise ValueError("every block needs at least one node")
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ValueError("need 0 <= p_out <= p_in <= 1")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(blocks)), blocks)
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = np.zeros((len(blocks), f))
    means[np.arange(len(blocks)), np.arange(len(blocks)) % f] = signal
    feats = means[labels] + noise * rng.standard_normal((n, f))
    return Graph(num_nodes=n, edges=edges, features=feats, labels=labels, num_classes=len(blocks))


# --------------------------------------------------------------- partitioning


def edge_cut(g: Graph, assignment: np.ndarray) -> int:
    if not len(g.edges):
        return 0
    return int(np.sum(assignment[g.edges[:, 0]] != assignment[g.edges[:, 1]]))


def random_partition(n: int, k: int, seed: int) -> np.ndarray:
    """Balanced random assignment of n nodes to k parts."""
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(n) % k)


def _bfs_dist(nbrs: list[list[int]], sources: list[int], n: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    q = deque()
    for s in sources:
        dist[s] = 0
        q.append(s)
    while q:
        u = q.popleft()
        for v in nbrs[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def greedy_partition(g: Graph, k: int, seed: int, tolerance: float = 0.1) -> np.ndarray:
    """Seeded greedy edge-cut partition into `k` parts.

    Regions are grown one at a time from spread-out seeds: each absorbs the
    frontier node whose move most reduces the cut (edges into the region
    minus edges to still-unassigned nodes) until it reaches its balanced
    size.  Nodes no region could reach join their smallest adjacent region,
    then one boundary pass moves nodes that strictly reduce the cut while
    keeping sizes within ``tolerance`` of balanced.
    """
    n = g.num_nodes
    if k > n:
        raise ValueError(f"cannot split {n} nodes into {k} parts")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    nbrs = g.neighbors()
    deg = np.array([len(x) for x in nbrs], dtype=np.int64)
    target = n / k
    cap = max(1, math.ceil(target * (1 + tolerance)))
    floor = max(1, math.floor(target * (1 - tolerance)))
    quotas = [n // k + (1 if r < n % k else 0) for r in range(k)]

    assign = -np.ones(n, dtype=np.int64)
    # links[v, r]: edges from node v into region r; free[v]: edges to unassigned nodes
    links = np.zeros((n, k), dtype=np.int64)
    free = deg.copy()

    def claim(v: int, r: int) -> None:
        assign[v] = r
        for u in nbrs[v]:
            links[u, r] += 1
            free[u] -= 1

    def pick_seed() -> int:
        unassigned = np.flatnonzero(assign < 0)
        placed = np.flatnonzero(assign >= 0)
        if placed.size == 0:
            return int(rng.choice(unassigned))
        dist = _bfs_dist(nbrs, list(placed), n)[unassigned]
        far = unassigned[dist == dist.max()]
        return int(rng.choice(far))

    for r in range(k - 1):
        size = 0
        while size < quotas[r]:
            frontier = np.flatnonzero((assign < 0) & (links[:, r] > 0))
            if frontier.size == 0:
                if size > 0:
                    break
                v = pick_seed()
            else:
                gain = links[frontier, r] - free[frontier]
                best = frontier[gain == gain.max()]
                v = int(best[0])
            claim(v, r)
            size += 1
    # the last region takes whatever it can reach; truly isolated leftovers follow
    r = k - 1
    rest = np.flatnonzero(assign < 0)
    if rest.size:
        claim(int(rest[0]), r)
        while True:
            frontier = np.flatnonzero((assign < 0) & (links[:, r] > 0))
            if frontier.size == 0:
                break
            claim(int(frontier[0]), r)

    sizes = np.bincount(assign[assign >= 0], minlength=k)
    for v in range(n):
        if assign[v] >= 0:
            continue
        adjacent = np.flatnonzero(links[v] > 0)
        pool = adjacent if adjacent.size else np.arange(k)
        r = int(pool[np.argmin(sizes[pool])])
        claim(v, r)
        sizes[r] += 1

    for v in range(n):
        own = assign[v]
        if sizes[own] - 1 < floor:
            continue
        gains = links[v] - links[v, own]
        gains[own] = 0
        gains[sizes + 1 > cap] = 0
        r = int(np.argmax(gains))
        if gains[r] > 0:
            assign[v] = r
            sizes[own] -= 1
            sizes[r] += 1
            for u in nbrs[v]:
                links[u, own] -= 1
                links[u, r] += 1
    return assign


def induced_shard(g: Graph, nodes, client_id: int) -> GraphShard:
    sub, gids = g.subgraph(nodes)
    return GraphShard(client_id=client_id, graph=sub, global_ids=gids)


def partition(g: Graph, spec: PartitionSpec) -> list[GraphShard]:
    """Split `g` into client shards (masks not yet assigned)."""
    if spec.num_clients > g.num_nodes:
        raise ValueError(f"num_clients={spec.num_clients} exceeds num_nodes={g.num_nodes}")
    if spec.mode == "non_overlapping":
        assign = greedy_partition(g, spec.num_clients, spec.seed)
        return [induced_shard(g, np.flatnonzero(assign == c), c) for c in range(spec.num_clients)]

    assign = greedy_partition(g, spec.base_parts, spec.seed)
    rng = np.random.default_rng([spec.seed, 1])
    shards = []
    for part in range(spec.base_parts):
        members = np.flatnonzero(assign == part)
        take = math.ceil(members.size / 2)
        for _ in range(spec.samples_per_part):
            chosen = rng.choice(members, size=take, replace=False)
            shards.append(induced_shard(g, chosen, len(shards)))
    return shards


def split_masks(shard: GraphShard, seed: int) -> GraphShard:
    """Random 40/30/30 train/val/test split of the shard's nodes."""
    n = shard.num_nodes
    if n < 3:
        raise ValueError(f"shard {shard.client_id} has {n} nodes; at least 3 needed for a split")
    n_train = max(1, int(math.floor(0.4 * n + 0.5)))
    n_val = max(1, int(math.floor(0.3 * n + 0.5)))
    if n_train + n_val >= n:
        n_val = n - n_train - 1
    perm = np.random.default_rng(seed).permutation(n)
    masks = np.zeros((3, n), dtype=bool)
    masks[0, perm[:n_train]] = True
    masks[1, perm[n_train : n_train + n_val]] = True
    masks[2, perm[n_train + n_val :]] = True
    return replace(shard, train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])

"""Server-side collaboration graph and learnable cellular-sheaf diffusion.

Client embeddings of width ``h`` are viewed as ``d`` stalk rows of
``f_c = h / d`` channels each, so the diffusion state is an
``(N*d) x f_c`` matrix whose rows ``n*d .. n*d+d-1`` belong to client n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ParamSet, glorot

__all__ = [
    "CollaborationGraph",
    "SheafStack",
    "knn_graph",
    "cosine_similarity",
    "build_sheaf_laplacian",
    "block_inv_sqrt",
    "normalize",
    "coboundary",
    "restriction_maps",
    "sheaf_layer",
    "diffuse",
    "EIG_FLOOR",
]

EIG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class CollaborationGraph:
    num_nodes: int
    edges: np.ndarray  # E x 2, u < v, lexicographically sorted
    x0: np.ndarray  # N x h

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if len(self.edges):
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a


def cosine_similarity(x: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm score 0 against all."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    return sim


def _knn_edges(sim: np.ndarray, k: int) -> np.ndarray:
    n = sim.shape[0]
    pairs = set()
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        # lexsort: last key is primary -> descending similarity, then lowest index
        order = np.lexsort((others, -sim[i, others]))
        for j in others[order[:k]]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array(sorted(pairs), dtype=np.int64)


def knn_graph(x0: np.ndarray, k: int) -> CollaborationGraph:
    """Cosine-similarity KNN graph, symmetrised by union."""
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    if n < 2:
        raise ValueError("a collaboration graph needs at least two clients")
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= K < N, got K={k}, N={n}")
    return CollaborationGraph(n, _knn_edges(cosine_similarity(x0), k), x0.copy())


def attach_node(graph: CollaborationGraph, x_new: np.ndarray, k: int) -> CollaborationGraph:
    """Append one client, linking it to its K nearest existing clients.
    Existing edges are kept as they are."""
    x0 = np.vstack([graph.x0, np.asarray(x_new, dtype=np.float64).reshape(1, -1)])
    n = graph.num_nodes
    sim = cosine_similarity(x0)[n, :n]
    order = np.lexsort((np.arange(n), -sim))[: min(k, n)]
    new_edges = np.array([[int(j), n] for j in sorted(order)], dtype=np.int64).reshape(-1, 2)
    edges = np.vstack([graph.edges, new_edges]) if len(graph.edges) else new_edges
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    return CollaborationGraph(n + 1, edges, x0)


# ------------------------------------------------------------ sheaf Laplacian


def build_sheaf_laplacian(num_nodes: int, edges: np.ndarray, f_src, f_dst) -> ad.Tensor:
    """Dense (N*d) x (N*d) sheaf Laplacian.

    For edge e = (n, m), ``f_src[e]`` is the restriction map of n into e and
    ``f_dst[e]`` that of m.  Diagonal blocks sum F^T F over incident edges,
    off-diagonal blocks are -F_n^T F_m.
    """
    f_src = f_src if isinstance(f_src, ad.Tensor) else ad.constant(f_src)
    f_dst = f_dst if isinstance(f_dst, ad.Tensor) else ad.constant(f_dst)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    n_edges = edges.shape[0]
    if f_src.shape[0] != n_edges or f_dst.shape[0] != n_edges:
        raise ValueError(f"need one restriction map per incident pair: {n_edges} edges, "
                         f"{f_src.shape[0]}/{f_dst.shape[0]} maps")
    d = f_src.shape[1] if n_edges else 1
    if n_edges == 0:
        return ad.constant(np.zeros((num_nodes, num_nodes)))
    a, b = f_src.data, f_dst.data
    u, v = edges[:, 0], edges[:, 1]
    blocks = np.zeros((num_nodes, num_nodes, d, d))
    ata = np.einsum("eki,ekj->eij", a, a)
    btb = np.einsum("eki,ekj->eij", b, b)
    atb = np.einsum("eki,ekj->eij", a, b)
    np.add.at(blocks, (u, u), ata)
    np.add.at(blocks, (v, v), btb)
    np.add.at(blocks, (u, v), -atb)
    np.add.at(blocks, (v, u), -np.transpose(atb, (0, 2, 1)))
    dense = blocks.transpose(0, 2, 1, 3).reshape(num_nodes * d, num_nodes * d)

    def bw(g):
        gb = g.reshape(num_nodes, d, num_nodes, d).transpose(0, 2, 1, 3)
        g_uu, g_vv, g_uv, g_vu = gb[u, u], gb[v, v], gb[u, v], gb[v, u]
        tr = lambda m: np.transpose(m, (0, 2, 1))  # noqa: E731
        ga = a @ (g_uu + tr(g_uu)) - b @ tr(g_uv) - b @ g_vu
        gbm = b @ (g_vv + tr(g_vv)) - a @ g_uv - a @ tr(g_vu)
        return ga, gbm

    return ad._make(dense, (f_src, f_dst), bw, "sheaf_laplacian")


def _inv_sqrt_divided_differences(lam: np.ndarray, eps: float):
    clipped = np.maximum(lam, eps)
    f = clipped**-0.5
    fprime = np.where(lam > eps, -0.5 * clipped**-1.5, 0.0)
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) <= 1e-10 * np.maximum(1.0, np.abs(lam[:, None]))
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(close, 0.5 * (fprime[:, None] + fprime[None, :]), (f[:, None] - f[None, :]) / diff)
    return f, k


def block_inv_sqrt(lap, d: int, eps: float = EIG_FLOOR) -> ad.Tensor:
    """Block-diagonal D^-1/2 from the d x d diagonal blocks of `lap`.

    Each block is symmetrised and inverted via eigendecomposition with the
    eigenvalues floored at `eps`.
    """
    lap = lap if isinstance(lap, ad.Tensor) else ad.constant(lap)
    total = lap.shape[0]
    if total % d:
        raise ValueError("Laplacian size is not a multiple of the stalk dimension")
    n = total // d
    blocks = np.stack([lap.data[i * d : (i + 1) * d, i * d : (i + 1) * d] for i in range(n)])
    blocks = 0.5 * (blocks + np.transpose(blocks, (0, 2, 1)))
    lam, vec = np.linalg.eigh(blocks)
    out = np.zeros((total, total))
    kernels = []
    for i in range(n):
        f, k = _inv_sqrt_divided_differences(lam[i], eps)
        out[i * d : (i + 1) * d, i * d : (i + 1) * d] = (vec[i] * f) @ vec[i].T
        kernels.append(k)

    def bw(g):
        grad = np.zeros((total, total))
        for i in range(n):
            sl = slice(i * d, (i + 1) * d)
            gi = g[sl, sl]
            gi = 0.5 * (gi + gi.T)
            u = vec[i]
            grad[sl, sl] = u @ (kernels[i] * (u.T @ gi @ u)) @ u.T
        return (grad,)

    return ad._make(out, (lap,), bw, "block_inv_sqrt")


def normalize(lap, d: int, eps: float = EIG_FLOOR) -> ad.Tensor:
    """D^-1/2 L D^-1/2 with D the block diagonal of L."""
    lap = lap if isinstance(lap, ad.Tensor) else ad.constant(lap)
    s = block_inv_sqrt(lap, d, eps)
    return ad.matmul(ad.matmul(s, lap), s)


def coboundary(num_nodes: int, edges: np.ndarray, f_src: np.ndarray, f_dst: np.ndarray) -> np.ndarray:
    """Dense coboundary: (delta x)_e = F_src x_u - F_dst x_v."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = edges.shape[0]
    d = f_src.shape[1] if e else 1
    delta = np.zeros((e * d, num_nodes * d))
    for i, (u, v) in enumerate(edges):
        delta[i * d : (i + 1) * d, u * d : (u + 1) * d] = f_src[i]
        delta[i * d : (i + 1) * d, v * d : (v + 1) * d] = -f_dst[i]
    return delta


# ------------------------------------------------------------------ diffusion


class SheafStack:
    """T_s diffusion layers.

    Layer t owns a restriction-map MLP (2h -> map_hidden -> d*d, ELU hidden,
    tanh output), W1 (d x d) and W2 (f_c x f_c).
    """

    def __init__(self, h: int, d: int = 2, layers: int = 2, map_hidden: int = 32, rng=None,
                 init_gain: float = 1.0):
        if h % d:
            raise ValueError(f"hidden size {h} is not divisible by stalk dim {d}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.h, self.d, self.fc = h, d, h // d
        self.num_layers = layers
        self.params = ParamSet()
        for t in range(layers):
            self.params[f"{t}.map_w1"] = glorot(rng, 2 * h, map_hidden)
            self.params[f"{t}.map_b1"] = np.zeros(map_hidden)
            self.params[f"{t}.map_w2"] = glorot(rng, map_hidden, d * d)
            self.params[f"{t}.map_b2"] = np.zeros(d * d)
            self.params[f"{t}.w1"] = glorot(rng, d, d, init_gain)
            self.params[f"{t}.w2"] = glorot(rng, self.fc, self.fc, init_gain)

    @staticmethod
    def layer_names(t: int) -> list[str]:
        return [f"{t}.{k}" for k in ("map_w1", "map_b1", "map_w2", "map_b2", "w1", "w2")]

    def zero_(self) -> SheafStack:
        for k in self.params:
            self.params[k] = np.zeros_like(self.params[k])
        return self


def restriction_maps(x_nodes: ad.Tensor, edges: np.ndarray, p: dict, t: int, d: int):
    """Per-edge maps (F_src, F_dst), each E x d x d, from endpoint features."""
    u, v = edges[:, 0], edges[:, 1]
    xu, xv = ad.gather_rows(x_nodes, u), ad.gather_rows(x_nodes, v)

    def mlp(inp):
        hid = ad.elu(ad.matmul(inp, p[f"{t}.map_w1"]) + p[f"{t}.map_b1"])
        return ad.tanh(ad.matmul(hid, p[f"{t}.map_w2"]) + p[f"{t}.map_b2"])

    f_src = ad.reshape(mlp(ad.concat_cols(xu, xv)), (len(edges), d, d))
    f_dst = ad.reshape(mlp(ad.concat_cols(xv, xu)), (len(edges), d, d))
    return f_src, f_dst


def _block_left_multiply(w1: ad.Tensor, x: ad.Tensor, n: int, d: int, fc: int) -> ad.Tensor:
    """(I_N kron W1) X without forming the Kronecker product."""
    stacked = ad.reshape(ad.transpose(ad.reshape(x, (n, d, fc)), (1, 0, 2)), (d, n * fc))
    mixed = ad.matmul(w1, stacked)
    return ad.reshape(ad.transpose(ad.reshape(mixed, (d, n, fc)), (1, 0, 2)), (n * d, fc))


def sheaf_layer(x: ad.Tensor, graph: CollaborationGraph, p: dict, t: int, d: int) -> ad.Tensor:
    """One residual step X + g(X) with g(X) = -elu(Delta (I kron W1) X W2)."""
    n = graph.num_nodes
    fc = x.shape[1]
    if len(graph.edges) == 0:
        return x
    x_nodes = ad.reshape(x, (n, d * fc))
    f_src, f_dst = restriction_maps(x_nodes, graph.edges, p, t, d)
    lap = build_sheaf_laplacian(n, graph.edges, f_src, f_dst)
    delta = normalize(lap, d)
    mixed = _block_left_multiply(p[f"{t}.w1"], x, n, d, fc)
    update = ad.elu(ad.matmul(ad.matmul(delta, mixed), p[f"{t}.w2"]))
    return ad.sub(x, update)


def diffuse(graph: CollaborationGraph, stack: SheafStack, params: dict | None = None,
            x0: ad.Tensor | None = None) -> ad.Tensor:
    """X_Ts = S(X0; theta) as an N x h tensor.

    `params` defaults to constants built from the stack; pass leaf tensors
    to differentiate w.r.t. theta.
    """
    p = params if params is not None else stack.params.constants()
    x = x0 if x0 is not None else ad.constant(graph.x0)
    n, h = x.shape
    if h != stack.h:
        raise ValueError(f"embedding width {h} does not match the stack's {stack.h}")
    state = ad.reshape(x, (n * stack.d, stack.fc))
    for t in range(stack.num_layers):
        state = sheaf_layer(state, graph, p, t, stack.d)
    return ad.reshape(state, (n, h))

import numpy as np
import pytest

from fedsheafhn import autodiff as ad
from fedsheafhn.config import RunConfig
from fedsheafhn.graphs import Graph, induced_shard, split_masks

FD_STEP = 1e-5


def numeric_grad(fn, arrays, step=FD_STEP):
    """Central differences of scalar fn(list of arrays) wrt every entry."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            up = fn(arrays)
            a[i] = old - step
            down = fn(arrays)
            a[i] = old
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    num = max(float(np.max(np.abs(a - n))) if a.size else 0.0 for a, n in zip(analytic, numeric))
    den = max(max(float(np.max(np.abs(n))) if n.size else 0.0 for n in numeric), 1e-8)
    return num / den


def check_grad(build, arrays, tol=1e-4):
    """`build(tensors) -> scalar Tensor`; compares tape gradients against
    central differences and returns the relative error."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [ad.tensor(a.copy()) for a in arrays]
    analytic = ad.grad(build(leaves), leaves)

    def value(arrs):
        return float(build([ad.constant(a) for a in arrs]).data)

    numeric = numeric_grad(value, arrays)
    err = rel_err(analytic, numeric)
    assert err <= tol, f"relative error {err:.2e} > {tol:.0e}"
    return err


def tiny_graph(n=6, f=3, c=2, seed=0, edges=None):
    rng = np.random.default_rng(seed)
    if edges is None:
        edges = [(i, i + 1) for i in range(n - 1)] + [(0, n - 1)]
    return Graph(num_nodes=n, edges=np.array(edges), features=rng.standard_normal((n, f)),
                 labels=np.arange(n) % c, num_classes=c)


def tiny_shard(n=10, f=3, c=2, seed=0, client_id=0):
    g = tiny_graph(n, f, c, seed)
    return split_masks(induced_shard(g, np.arange(n), client_id), seed)


def fixture_config(**kw):
    base = dict(seed=0, rounds=30, hidden=32, local_epochs=3, num_clients=8,
                sbm_blocks=(60, 60, 60, 60), sbm_p_in=0.2, sbm_p_out=0.02)
    base.update(kw)
    return RunConfig(**base)


def small_config(**kw):
    """A few-second run: 4 clients on a 4 x 20 SBM."""
    base = dict(seed=0, rounds=6, hidden=8, hn_hidden=16, map_hidden=8, local_epochs=2, num_clients=4,
                sbm_blocks=(20, 20, 20, 20), sbm_p_in=0.3, sbm_p_out=0.02, sbm_features=6)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

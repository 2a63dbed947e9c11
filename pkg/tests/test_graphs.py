import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsheafhn.graphs import (
    Graph,
    GraphFormatError,
    PartitionSpec,
    edge_cut,
    greedy_partition,
    induced_shard,
    load_planetoid,
    partition,
    random_partition,
    sbm_generate,
    split_masks,
)

CORA_DIR = Path(os.environ.get("FSHN_CORA_DIR", Path(__file__).resolve().parents[1] / "data" / "cora"))


def write_toy(tmp_path, nodes, edges, classes=None):
    (tmp_path / "nodes.txt").write_text("".join(line + "\n" for line in nodes), encoding="utf-8")
    (tmp_path / "edges.txt").write_text("".join(line + "\n" for line in edges), encoding="utf-8")
    if classes is not None:
        (tmp_path / "classes.txt").write_text("\n".join(classes) + "\n", encoding="utf-8")
    return tmp_path


def test_load_two_nodes_one_edge(tmp_path):
    g = load_planetoid(write_toy(tmp_path, ["a 1 0 x", "b 0 1 y"], ["a b"]))
    assert g.num_nodes == 2
    assert g.edges.tolist() == [[0, 1]]
    assert g.num_classes == 2
    np.testing.assert_array_equal(g.features, [[1, 0], [0, 1]])


def test_load_dedups_reverse_edge(tmp_path):
    g = load_planetoid(write_toy(tmp_path, ["0 1 x", "1 0 y"], ["0 1", "1 0"]))
    assert g.edges.tolist() == [[0, 1]]


def test_loader_counts_match_files(tmp_path):
    nodes = [f"n{i} {i % 2} {(i + 1) % 2} c{i % 3}" for i in range(7)]
    edges = ["n0 n1", "n1 n2", "n2 n3", "n3 n4", "n5 n6", "n6 n5", "n0 n6"]
    g = load_planetoid(write_toy(tmp_path, nodes, edges))
    assert g.num_nodes == 7
    assert len(g.edges) == 6  # 7 lines, one reverse duplicate
    assert g.num_classes == 3


@pytest.mark.parametrize(
    "nodes, edges, message",
    [
        (["a 1 x", "b 0 y"], ["a c"], "dangling"),
        (["a 1 x", "b 0 1 y"], [], "expected 1 features"),
        (["a 1 x", "a 0 y"], [], "duplicate"),
        (["a q x"], [], "non-numeric"),
    ],
)
def test_loader_rejects_malformed(tmp_path, nodes, edges, message):
    with pytest.raises(GraphFormatError, match=message):
        load_planetoid(write_toy(tmp_path, nodes, edges))


def test_loader_rejects_unknown_label(tmp_path):
    with pytest.raises(GraphFormatError, match="unknown labels"):
        load_planetoid(write_toy(tmp_path, ["a 1 x", "b 0 z"], [], classes=["x", "y"]))


def test_loader_reads_raw_content_cites(tmp_path):
    (tmp_path / "toy.content").write_text("p1 1 0 A\np2 0 1 B\n", encoding="utf-8")
    (tmp_path / "toy.cites").write_text("p2 p1\n", encoding="utf-8")
    g = load_planetoid(tmp_path)
    assert g.num_nodes == 2 and g.edges.tolist() == [[0, 1]]


@pytest.mark.skipif(not CORA_DIR.exists(), reason="Cora files not supplied")
def test_cora_statistics():
    g = load_planetoid(CORA_DIR)
    assert g.num_nodes == 2708
    assert g.num_classes == 7


def test_graph_validation():
    with pytest.raises(ValueError):
        Graph(2, np.array([[0, 2]]), np.zeros((2, 1)), np.zeros(2), 1)
    with pytest.raises(ValueError):
        Graph(2, np.zeros((0, 2)), np.zeros((2, 1)), np.array([0, 3]), 2)


def test_sbm_two_disjoint_cliques():
    g = sbm_generate([2, 2], 1.0, 0.0, f=3, seed=0)
    assert g.edges.tolist() == [[0, 1], [2, 3]]
    assert g.labels.tolist() == [0, 0, 1, 1]


def test_sbm_deterministic():
    a = sbm_generate([5, 6], 0.5, 0.1, f=4, seed=3)
    b = sbm_generate([5, 6], 0.5, 0.1, f=4, seed=3)
    assert a.edges.tobytes() == b.edges.tobytes()
    assert a.features.tobytes() == b.features.tobytes()


def test_sbm_uniform_density_monte_carlo():
    # p_in == p_out: every pair is an independent Bernoulli(p) trial
    blocks, p = [10, 10, 10], 0.3
    n = sum(blocks)
    pairs = n * (n - 1) // 2
    counts = [len(sbm_generate(blocks, p, p, f=2, seed=s).edges) for s in range(20)]
    sigma = np.sqrt(pairs * p * (1 - p) / 20)
    assert abs(np.mean(counts) - pairs * p) <= 3 * sigma
    # within-block and cross-block densities agree too
    g = sbm_generate(blocks, p, p, f=2, seed=99)
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    within_pairs = sum(b * (b - 1) // 2 for b in blocks)
    d_in, d_out = same.sum() / within_pairs, (~same).sum() / (pairs - within_pairs)
    assert abs(d_in - d_out) < 0.12


def test_partition_single_client_is_whole_graph():
    g = sbm_generate([6, 6], 0.5, 0.1, f=3, seed=1)
    (shard,) = partition(g, PartitionSpec(num_clients=1, seed=0))
    assert shard.graph.num_nodes == g.num_nodes
    assert shard.graph.edges.tobytes() == g.edges.tobytes()
    assert shard.graph.features.tobytes() == g.features.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_non_overlapping_partition_law(k, seed):
    g = sbm_generate([8, 7, 9], 0.4, 0.05, f=2, seed=seed)
    shards = partition(g, PartitionSpec(num_clients=k, seed=seed))
    sets = [set(s.global_ids.tolist()) for s in shards]
    assert set().union(*sets) == set(range(g.num_nodes))
    assert sum(len(s) for s in sets) == g.num_nodes
    assert all(len(s) > 0 for s in sets)


def test_greedy_cut_beats_random_average():
    g = sbm_generate([4, 4, 4], 0.9, 0.1, f=2, seed=0)
    greedy = edge_cut(g, greedy_partition(g, 3, seed=0))
    random_mean = np.mean([edge_cut(g, random_partition(g.num_nodes, 3, s)) for s in range(100)])
    assert greedy <= random_mean


def test_greedy_balance_within_tolerance():
    g = sbm_generate([60, 60, 60, 60], 0.2, 0.02, f=4, seed=0)
    sizes = np.bincount(greedy_partition(g, 8, seed=0), minlength=8)
    assert sizes.min() >= np.floor(30 * 0.9) and sizes.max() <= np.ceil(30 * 1.1)


def test_overlapping_partition_sizes_and_overlap():
    g = sbm_generate([15, 15], 0.4, 0.05, f=2, seed=2)
    spec = PartitionSpec(mode="overlapping", num_clients=10, seed=0)
    assert spec.base_parts == 2
    shards = partition(g, spec)
    assert len(shards) == 10
    base = greedy_partition(g, 2, seed=0)
    for part in range(2):
        group = shards[part * 5 : (part + 1) * 5]
        size = int(np.ceil(np.sum(base == part) / 2))
        assert all(s.num_nodes == size for s in group)
        assert all(np.all(base[s.global_ids] == part) for s in group)
        # two half-samples of the same part must intersect
        assert set(group[0].global_ids) & set(group[1].global_ids)


def test_overlapping_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(mode="overlapping", num_clients=7)


def test_shard_keeps_induced_edges():
    g = sbm_generate([5, 5], 1.0, 0.0, f=2, seed=0)
    shard = induced_shard(g, [0, 1, 2, 7], 0)
    assert shard.graph.edges.tolist() == [[0, 1], [0, 2], [1, 2]]


def test_split_ten_nodes_is_4_3_3():
    g = sbm_generate([10], 0.5, 0.5, f=2, seed=0)
    s = split_masks(induced_shard(g, np.arange(10), 0), seed=4)
    assert (s.train_mask.sum(), s.val_mask.sum(), s.test_mask.sum()) == (4, 3, 3)


@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_masks_disjoint_covering_deterministic(n, seed):
    g = sbm_generate([n], 0.1, 0.1, f=1, seed=0)
    shard = induced_shard(g, np.arange(n), 0)
    a, b = split_masks(shard, seed), split_masks(shard, seed)
    stack = np.stack([a.train_mask, a.val_mask, a.test_mask]).astype(int)
    assert np.all(stack.sum(axis=0) == 1)
    assert abs(a.train_mask.sum() - 0.4 * n) <= 1 and abs(a.val_mask.sum() - 0.3 * n) <= 1.5
    assert a.train_mask.tobytes() == b.train_mask.tobytes() and a.test_mask.tobytes() == b.test_mask.tobytes()


def test_split_rejects_tiny_shard():
    g = sbm_generate([2], 1.0, 1.0, f=1, seed=0)
    with pytest.raises(ValueError):
        split_masks(induced_shard(g, [0, 1], 0), 0)

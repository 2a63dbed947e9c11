"""Dataset -> client shards, as described by a RunConfig."""

from __future__ import annotations

from .config import RunConfig
from .graphs import Graph, GraphShard, PartitionSpec, load_planetoid, partition, sbm_generate, split_masks


def load_graph(cfg: RunConfig) -> Graph:
    if cfg.source == "planetoid":
        return load_planetoid(cfg.planetoid_dir)
    return sbm_generate(cfg.sbm_blocks, cfg.sbm_p_in, cfg.sbm_p_out, cfg.sbm_features,
                        seed=cfg.effective_data_seed, signal=cfg.sbm_signal, noise=cfg.sbm_noise)


def build_shards(cfg: RunConfig, graph: Graph | None = None) -> tuple[list[GraphShard], list[GraphShard]]:
    """Partition and split; the last `holdout` shards are returned separately
    as unseen clients."""
    graph = graph if graph is not None else load_graph(cfg)
    spec = PartitionSpec(mode=cfg.partition_mode, num_clients=cfg.num_clients, seed=cfg.effective_data_seed,
                         base_parts=cfg.base_parts, samples_per_part=cfg.samples_per_part)
    shards = [split_masks(s, [cfg.effective_data_seed, s.client_id]) for s in partition(graph, spec)]
    cut = len(shards) - cfg.holdout
    return shards[:cut], shards[cut:]

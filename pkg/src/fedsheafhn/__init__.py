"""Deterministic simulator for federated node classification where a server
diffuses client descriptors over a learned sheaf and a hypernetwork emits
each client's GCN backbone."""

from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .federation import FedAvg, FedSheafHN, LocalOnly, RoundReport, add_new_clients
from .pipeline import build_shards, load_graph

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "parse_config_text",
    "FedSheafHN",
    "FedAvg",
    "LocalOnly",
    "RoundReport",
    "add_new_clients",
    "build_shards",
    "load_graph",
]

__version__ = "0.1.0"

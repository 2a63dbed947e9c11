"""Run configuration: INI-style ``key = value`` text with sections.

Every key is declared in ``SCHEMA``; unknown sections or keys, duplicate
keys, bad types and out-of-range values are rejected with a
:class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable

__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_config_text", "METHODS", "VARIANTS"]

VARIANTS = ("no_sheaf", "gcn_collab", "no_attention", "static_embedding", "onehot_hn", "mean_collab")
METHODS = ("fedsheafhn", "local", "fedavg") + tuple(f"ablation:{v}" for v in VARIANTS)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _str(s: str) -> str:
    return s.strip()


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "auto", "none") else int(s)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s

    return parse


_ge0 = lambda v: v >= 0  # noqa: E731
_ge1 = lambda v: v >= 1  # noqa: E731
_prob = lambda v: 0.0 <= v <= 1.0  # noqa: E731
_drop = lambda v: 0.0 <= v < 1.0  # noqa: E731

# (section, key) -> (field name, parser, default, check, description of check)
SCHEMA: dict[tuple[str, str], tuple[str, Callable[[str], Any], Any, Callable | None, str]] = {
    ("run", "seed"): ("seed", _int, None, None, ""),
    ("run", "method"): ("method", _choice(*METHODS), "fedsheafhn", None, ""),
    ("run", "rounds"): ("rounds", _int, 100, _ge0, ">= 0"),
    ("run", "output_dir"): ("output_dir", _str, "runs/default", None, ""),
    ("run", "threads"): ("threads", _int, 1, _ge1, ">= 1"),
    ("run", "frozen"): ("frozen", _bool, False, None, ""),
    ("data", "source"): ("source", _choice("sbm", "planetoid"), "sbm", None, ""),
    ("data", "planetoid_dir"): ("planetoid_dir", _str, "", None, ""),
    ("data", "sbm_blocks"): ("sbm_blocks", _int_list, (60, 60, 60, 60), lambda v: len(v) > 0 and min(v) > 0,
                             "non-empty positive sizes"),
    ("data", "sbm_p_in"): ("sbm_p_in", _float, 0.2, _prob, "in [0, 1]"),
    ("data", "sbm_p_out"): ("sbm_p_out", _float, 0.02, _prob, "in [0, 1]"),
    ("data", "sbm_features"): ("sbm_features", _int, 16, _ge1, ">= 1"),
    ("data", "sbm_signal"): ("sbm_signal", _float, 1.0, _ge0, ">= 0"),
    ("data", "sbm_noise"): ("sbm_noise", _float, 1.0, _ge0, ">= 0"),
    ("data", "data_seed"): ("data_seed", _opt_int, None, None, ""),
    ("partition", "mode"): ("partition_mode", _choice("non_overlapping", "overlapping"), "non_overlapping", None, ""),
    ("partition", "num_clients"): ("num_clients", _int, 10, _ge1, ">= 1"),
    ("partition", "base_parts"): ("base_parts", _opt_int, None, None, ""),
    ("partition", "samples_per_part"): ("samples_per_part", _int, 5, _ge1, ">= 1"),
    ("client", "hidden"): ("hidden", _int, 128, _ge1, ">= 1"),
    ("client", "local_epochs"): ("local_epochs", _int, 3, _ge1, ">= 1"),
    ("client", "lr"): ("client_lr", _float, 0.01, _ge0, ">= 0"),
    ("client", "optimizer"): ("client_optimizer", _choice("sgd", "adam"), "sgd", None, ""),
    ("client", "weight_decay"): ("client_weight_decay", _float, 5e-4, _ge0, ">= 0"),
    ("client", "dropout"): ("client_dropout", _float, 0.0, _drop, "in [0, 1)"),
    ("server", "sheaf_lr"): ("sheaf_lr", _float, 0.001, _ge0, ">= 0"),
    ("server", "hn_lr"): ("hn_lr", _float, 0.001, _ge0, ">= 0"),
    ("server", "optimizer"): ("server_optimizer", _choice("adam", "sgd"), "adam", None, ""),
    ("server", "sheaf_weight_decay"): ("sheaf_weight_decay", _float, 5e-4, _ge0, ">= 0"),
    ("server", "knn_k"): ("knn_k", _opt_int, None, None, ""),
    ("server", "stalk_dim"): ("stalk_dim", _int, 2, _ge1, ">= 1"),
    ("server", "sheaf_layers"): ("sheaf_layers", _int, 2, _ge1, ">= 1"),
    ("server", "map_hidden"): ("map_hidden", _int, 32, _ge1, ">= 1"),
    ("server", "refresh_interval"): ("refresh_interval", _int, 5, _ge1, ">= 1"),
    ("server", "hn_hidden"): ("hn_hidden", _int, 128, _ge1, ">= 1"),
    ("server", "hn_dropout"): ("hn_dropout", _float, 0.3, _drop, "in [0, 1)"),
    ("attack", "ratio"): ("attack_ratio", _float, 0.0, _prob, "in [0, 1]"),
    ("attack", "kind"): ("attack_kind", _choice("same_value", "gaussian"), "same_value", None, ""),
    ("attack", "tau"): ("attack_tau", _float, 1.0, _ge0, ">= 0"),
    ("new_clients", "holdout"): ("holdout", _int, 0, _ge0, ">= 0"),
    ("new_clients", "epochs"): ("new_client_epochs", _opt_int, None, None, ""),
}

REQUIRED = {("run", "seed")}
_RATES = ("client_lr", "sheaf_lr", "hn_lr")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    method: str = "fedsheafhn"
    rounds: int = 100
    output_dir: str = "runs/default"
    threads: int = 1
    frozen: bool = False
    source: str = "sbm"
    planetoid_dir: str = ""
    sbm_blocks: tuple[int, ...] = (60, 60, 60, 60)
    sbm_p_in: float = 0.2
    sbm_p_out: float = 0.02
    sbm_features: int = 16
    sbm_signal: float = 1.0
    sbm_noise: float = 1.0
    data_seed: int | None = None
    partition_mode: str = "non_overlapping"
    num_clients: int = 10
    base_parts: int | None = None
    samples_per_part: int = 5
    hidden: int = 128
    local_epochs: int = 3
    client_lr: float = 0.01
    client_optimizer: str = "sgd"
    client_weight_decay: float = 5e-4
    client_dropout: float = 0.0
    sheaf_lr: float = 0.001
    hn_lr: float = 0.001
    server_optimizer: str = "adam"
    sheaf_weight_decay: float = 5e-4
    knn_k: int | None = None
    stalk_dim: int = 2
    sheaf_layers: int = 2
    map_hidden: int = 32
    refresh_interval: int = 5
    hn_hidden: int = 128
    hn_dropout: float = 0.3
    attack_ratio: float = 0.0
    attack_kind: str = "same_value"
    attack_tau: float = 1.0
    holdout: int = 0
    new_client_epochs: int | None = None

    def __post_init__(self):
        _validate(self)

    @property
    def variant(self) -> str:
        return self.method.split(":", 1)[1] if self.method.startswith("ablation:") else "full"

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @property
    def trained_clients(self) -> int:
        return self.num_clients - self.holdout

    def k_for(self, n: int) -> int:
        k = self.knn_k if self.knn_k is not None else max(1, math.ceil(math.log2(max(n, 2))))
        return min(k, n - 1)

    def with_overrides(self, **kw) -> RunConfig:
        return replace(self, **kw)


def _validate(cfg: RunConfig) -> None:
    if cfg.sbm_p_out > cfg.sbm_p_in:
        raise ConfigError("sbm_p_out", "must not exceed sbm_p_in")
    if cfg.hidden % cfg.stalk_dim:
        raise ConfigError("stalk_dim", f"must divide hidden={cfg.hidden}")
    if cfg.source == "planetoid" and not cfg.planetoid_dir:
        raise ConfigError("planetoid_dir", "required when source = planetoid")
    if cfg.holdout >= cfg.num_clients:
        raise ConfigError("holdout", "must leave at least one trained client")
    if cfg.knn_k is not None and cfg.knn_k < 1:
        raise ConfigError("knn_k", "must be >= 1")
    if cfg.new_client_epochs is not None and cfg.new_client_epochs < 1:
        raise ConfigError("epochs", "must be >= 1")
    if not cfg.frozen:
        for name in _RATES:
            if getattr(cfg, name) <= 0:
                raise ConfigError(name, "learning rates must be > 0 unless frozen = true")


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(exc.option, f"duplicate key in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(exc.section, "duplicate section") from exc
    except configparser.Error as exc:
        raise ConfigError("<parse>", str(exc)) from exc

    known_sections = {s for s, _ in SCHEMA}
    values: dict[str, Any] = {}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(section, "unknown section")
        for key, raw in parser.items(section):
            if (section, key) not in SCHEMA:
                raise ConfigError(key, f"unknown key in [{section}]")
            name, parse, _, check, desc = SCHEMA[(section, key)]
            try:
                value = parse(raw)
            except ValueError as exc:
                raise ConfigError(key, f"type error: {exc}") from exc
            if check is not None and value is not None and not check(value):
                raise ConfigError(key, f"out of range (must be {desc}), got {raw.strip()}")
            values[name] = value
    for section, key in REQUIRED:
        if SCHEMA[(section, key)][0] not in values:
            raise ConfigError(key, f"missing required key in [{section}]")
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def config_fields() -> list[str]:
    return [f.name for f in fields(RunConfig)]

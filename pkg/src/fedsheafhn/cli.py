"""Command-line entry point.

    fedsheafhn run --config run.ini [--seed N] [--method M] [--out DIR] [--resume]
    fedsheafhn new-clients --checkpoint DIR/checkpoint.fshn --config run.ini
    fedsheafhn emit-convergence --in a/metrics.csv [b/metrics.csv ...] --out conv.csv
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .client import evaluate
from .config import METHODS, ConfigError, RunConfig, parse_config
from .federation import FedAvg, FedSheafHN, LocalOnly, add_new_clients
from .metrics import MetricsWriter, emit_convergence, read_grad_norms, summary, truncate_rounds, write_json
from .pipeline import build_shards

log = logging.getLogger("fedsheafhn")

CHECKPOINT_NAME = "checkpoint.fshn"


def make_simulator(cfg: RunConfig, shards):
    if cfg.method == "local":
        return LocalOnly(shards, cfg)
    if cfg.method == "fedavg":
        return FedAvg(shards, cfg)
    return FedSheafHN(shards, cfg)


def _current_round(sim) -> int:
    return sim.server.round if isinstance(sim, FedSheafHN) else sim.round


def _config_meta(cfg: RunConfig) -> dict:
    meta = dataclasses.asdict(cfg)
    meta["sbm_blocks"] = list(cfg.sbm_blocks)
    return meta


def save_checkpoint(sim, cfg: RunConfig, path) -> Path:
    meta, arrays = sim.state_arrays()
    meta["config"] = _config_meta(cfg)
    return checkpoint.save(path, meta, arrays)


def load_checkpoint(sim, cfg: RunConfig, path) -> dict:
    meta, arrays = checkpoint.load(path)
    stored = meta.get("config", {})
    for key in ("seed", "method", "hidden", "num_clients", "holdout"):
        if key in stored and stored[key] != getattr(cfg, key):
            raise ConfigError(key, f"checkpoint was written with {key}={stored[key]!r}, "
                                   f"config has {getattr(cfg, key)!r}")
    sim.load_state_arrays(meta, arrays)
    return meta


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        overrides["method"] = args.method
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    shards, _ = build_shards(cfg)
    sim = make_simulator(cfg, shards)
    client_ids = [s.client_id for s in shards]
    ckpt = out / CHECKPOINT_NAME

    append = False
    if args.resume and ckpt.exists():
        load_checkpoint(sim, cfg, ckpt)
        done = _current_round(sim)
        truncate_rounds(out / "metrics.csv", done)
        truncate_rounds(out / "server.csv", done)
        append = True
        log.info("resuming %s at round %d", cfg.method, done)
    writer = MetricsWriter(out / "metrics.csv", client_ids, append=append)

    reports = []
    while _current_round(sim) < cfg.rounds:
        report = sim.step()
        writer.write(report)
        reports.append(report)
        r = report.round + 1
        if r % cfg.refresh_interval == 0:
            save_checkpoint(sim, cfg, ckpt)
        log.info("round %d federated accuracy %.4f", report.round, report.federated_accuracy)
    save_checkpoint(sim, cfg, ckpt)

    if reports:
        write_json(out / "summary.json", summary(reports[-1], client_ids, cfg.method, cfg.seed,
                                                 read_grad_norms(out / "server.csv")))
        print(f"{cfg.method} seed {cfg.seed}: federated accuracy {reports[-1].federated_accuracy:.4f} "
              f"after {reports[-1].round + 1} rounds -> {out}")
    return 0


def cmd_new_clients(args) -> int:
    cfg = _load_config(args)
    if cfg.method not in ("fedsheafhn",) and not cfg.method.startswith("ablation:"):
        raise ConfigError("method", "new clients need a hypernetwork run (fedsheafhn or an ablation)")
    if cfg.holdout < 1:
        raise ConfigError("holdout", "set [new_clients] holdout >= 1 to reserve unseen clients")
    trained, held = build_shards(cfg)
    sim = FedSheafHN(trained, cfg)
    load_checkpoint(sim, cfg, args.checkpoint)
    result = add_new_clients(sim, held, epochs=args.epochs)
    trained_acc = float(np.mean([evaluate(c, "test") for c in sim.clients]))
    payload = {
        "new_client_ids": result.client_ids,
        "new_client_accuracy": {str(c): float(a) for c, a in zip(result.client_ids, result.accuracy)},
        "new_mean_accuracy": result.mean_accuracy,
        "trained_mean_accuracy": trained_acc,
        "checkpoint_round": sim.server.round,
    }
    out = Path(args.out or cfg.output_dir) / "new_clients.json"
    write_json(out, payload)
    print(f"{len(held)} new clients: mean accuracy {result.mean_accuracy:.4f} -> {out}")
    return 0


def cmd_emit_convergence(args) -> int:
    path = emit_convergence(args.inputs, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsheafhn", description="Federated GCN simulator with sheaf diffusion and a hypernetwork")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method and write metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--method", choices=METHODS)
    run.add_argument("--out", help="output directory (overrides [run] output_dir)")
    run.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.fshn if present")
    run.set_defaults(func=cmd_run)

    new = sub.add_parser("new-clients", help="onboard held-out clients with the server frozen")
    new.add_argument("--checkpoint", required=True)
    new.add_argument("--config", required=True)
    new.add_argument("--epochs", type=int, help="head-training epochs (default: local epochs)")
    new.add_argument("--out")
    new.set_defaults(func=cmd_new_clients)

    conv = sub.add_parser("emit-convergence", help="round vs federated accuracy as CSV")
    conv.add_argument("--in", dest="inputs", nargs="+", required=True)
    conv.add_argument("--out", required=True)
    conv.set_defaults(func=cmd_emit_convergence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config key {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

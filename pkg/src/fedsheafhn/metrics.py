"""Metric files: per-round CSV rows, the run summary and convergence data."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .federation import SPLITS, RoundReport

HEADER = ("round", "client_id", "split", "accuracy", "loss")
SERVER_HEADER = ("round", "surrogate_loss", "grad_norm_sq")
AGGREGATE = -1


class MetricsError(ValueError):
    pass


def _fmt(x: float) -> str:
    # repr round-trips float64 exactly and is platform independent
    return repr(float(x))


def report_rows(report: RoundReport, client_ids) -> list[tuple]:
    """One row per (client, split) plus one aggregate row per split."""
    rows = []
    for i, cid in enumerate(client_ids):
        for split in SPLITS:
            rows.append((report.round, int(cid), split, _fmt(report.accuracy[split][i]), _fmt(report.loss[split][i])))
    for split in SPLITS:
        rows.append((report.round, AGGREGATE, split, _fmt(np.mean(report.accuracy[split])),
                     _fmt(np.mean(report.loss[split]))))
    return rows


class MetricsWriter:
    """Appends rows as rounds complete so a crash keeps finished rounds."""

    def __init__(self, path, client_ids, append: bool = False):
        self.path = Path(path)
        self.client_ids = list(client_ids)
        self.server_path = self.path.with_name("server.csv")
        if not append:
            _write_header(self.path, HEADER)
            _write_header(self.server_path, SERVER_HEADER)

    def write(self, report: RoundReport) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(report_rows(report, self.client_ids))
        with self.server_path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                (report.round, _fmt(report.surrogate_loss), _fmt(report.grad_norm_sq)))


def _write_header(path: Path, header) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerow(header)


def truncate_rounds(path, keep_below: int) -> None:
    """Drop rows with round >= keep_below (used when resuming)."""
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < keep_below]
    path.write_text("".join(kept), encoding="utf-8", newline="")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEADER:
            raise MetricsError(f"{path}: expected header {','.join(HEADER)}")
        return [
            {"round": int(r["round"]), "client_id": int(r["client_id"]), "split": r["split"],
             "accuracy": float(r["accuracy"]), "loss": float(r["loss"])}
            for r in reader
        ]


def federated_curve(rows: list[dict]) -> dict[int, float]:
    """round -> mean test accuracy over clients, recomputed from client rows."""
    per_round: dict[int, list[float]] = {}
    for r in rows:
        if r["split"] == "test" and r["client_id"] != AGGREGATE:
            per_round.setdefault(r["round"], []).append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in sorted(per_round.items())}


def read_grad_norms(path) -> list[float]:
    """Server grad-norm^2 column of server.csv (empty for baselines)."""
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="", encoding="utf-8") as fh:
        values = [float(r["grad_norm_sq"]) for r in csv.DictReader(fh)]
    return [v for v in values if np.isfinite(v)]


def summary(last: RoundReport, client_ids, method: str, seed: int, grad_norms=(), extra: dict | None = None) -> dict:
    out = {
        "method": method,
        "seed": seed,
        "rounds": last.round + 1,
        "final_round": last.round,
        "federated_accuracy": last.federated_accuracy,
        "client_std": last.client_std,
        "val_accuracy": float(np.mean(last.accuracy["val"])),
        "client_accuracy": {str(cid): float(a) for cid, a in zip(client_ids, last.accuracy["test"])},
        "grad_norm_sq": list(grad_norms),
    }
    if last.malicious.size:
        out["malicious_clients"] = [int(client_ids[i]) for i in last.malicious]
        out["benign_accuracy"] = last.benign_accuracy()
    out.update(extra or {})
    return out


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _method_name(metrics_path: Path) -> str:
    summary_path = metrics_path.with_name("summary.json")
    if summary_path.exists():
        try:
            return str(json.loads(summary_path.read_text(encoding="utf-8"))["method"])
        except (KeyError, json.JSONDecodeError):
            pass
    return metrics_path.parent.name or metrics_path.stem


def emit_convergence(inputs, out) -> Path:
    """Write ``round,<method>...`` columns of federated accuracy.

    Each input metrics.csv contributes one column, named after the method in
    its sibling summary.json (or its directory name). Rounds missing from a
    run are left blank.
    """
    inputs = [Path(p) for p in ([inputs] if isinstance(inputs, (str, Path)) else inputs)]
    if not inputs:
        raise MetricsError("no metrics files given")
    columns: list[tuple[str, dict[int, float]]] = []
    for path in inputs:
        curve = federated_curve(read_metrics(path))
        if not curve:
            raise MetricsError(f"{path}: no rounds recorded")
        name = _method_name(path)
        taken = {c for c, _ in columns}
        suffix = 2
        base = name
        while name in taken:
            name = f"{base}_{suffix}"
            suffix += 1
        columns.append((name, curve))
    rounds = sorted(set().union(*(c.keys() for _, c in columns)))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round"] + [name for name, _ in columns])
        for r in rounds:
            w.writerow([r] + [_fmt(c[r]) if r in c else "" for _, c in columns])
    return out

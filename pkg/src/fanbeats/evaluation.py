"""Forecast metrics, scenario scoring, runtime probes and report tables."""

from __future__ import annotations

import csv
import math
import statistics
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DataConfigError, DomainDataset, Scenario
from .model import NBeatsModel, model_forward_full, predict
from . import numcore as nc

NA = float("nan")
NA_THRESHOLD = 10_000.0
SMAPE_GUARD = 1e-12


def is_na(value: float) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def smape_metric(preds, targets) -> float:
    """Mean of 2|y - yhat| / (|y| + |yhat|) over all flattened values; 0/0 terms count 0."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise nc.DimensionError(f"prediction size {p.size} differs from target size {y.size}")
    den = np.abs(p) + np.abs(y)
    ok = den >= SMAPE_GUARD
    terms = np.zeros_like(den)
    terms[ok] = np.abs(y[ok] - p[ok]) / den[ok]
    return float(2.0 * terms.mean())


class MetricError(ValueError):
    pass


def mase_metric(preds, targets, per_instance: bool = False) -> float:
    """MAE scaled by the mean absolute one-step change of the targets.

    The default concatenates all instances (row-major, dataset order) into
    one sequence, so adjacent instances contribute a change term too.
    ``per_instance`` scales each row by its own naive error and averages.
    Returns :data:`NA` when the scale is below 1e-12.
    """
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise nc.DimensionError(f"prediction shape {p.shape} differs from target shape {y.shape}")
    if per_instance:
        p2, y2 = np.atleast_2d(p), np.atleast_2d(y)
        if y2.shape[1] < 2:
            raise MetricError("per-instance MASE needs horizon >= 2")
        num = np.abs(y2 - p2).mean(axis=1)
        den = np.abs(np.diff(y2, axis=1)).mean(axis=1)
        ok = den >= 1e-12
        return float((num[ok] / den[ok]).mean()) if np.any(ok) else NA
    p, y = p.reshape(-1), y.reshape(-1)
    if y.size < 2:
        raise MetricError(f"MASE needs at least two values, got {y.size}")
    den = np.abs(np.diff(y)).mean()
    if den < 1e-12:
        return NA
    return float(np.abs(y - p).mean() / den)


@dataclass
class MetricsRow:
    scenario: str
    kind: str
    model: str
    divergence: str
    smape: float
    mase: float
    n_instances: int
    seeds: str = ""
    runtime_ms_per_iter: float = NA
    extra: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def aggregate(self, by: Sequence[str] = ("kind", "model", "divergence")) -> list[dict]:
        """Mean and seed-wise std of SMAPE/MASE per group, NA members skipped for MASE."""
        groups: OrderedDict[tuple, list[MetricsRow]] = OrderedDict()
        for r in self.rows:
            groups.setdefault(tuple(getattr(r, k) for k in by), []).append(r)
        out = []
        for key, members in groups.items():
            sm = [r.smape for r in members]
            ms = [r.mase for r in members if not is_na(r.mase)]
            rt = [r.runtime_ms_per_iter for r in members if not is_na(r.runtime_ms_per_iter)]
            out.append(
                {
                    **dict(zip(by, key)),
                    "smape": float(np.mean(sm)),
                    "smape_std": float(np.std(sm)),
                    "mase": float(np.mean(ms)) if ms else NA,
                    "mase_std": float(np.std(ms)) if ms else NA,
                    "runtime_ms_per_iter": float(np.mean(rt)) if rt else NA,
                    "n_rows": len(members),
                }
            )
        return out

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = [f for f in MetricsRow.__dataclass_fields__ if f != "extra"]
        extra_cols = sorted({k for r in self.rows for k in r.extra})
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + extra_cols)
            for r in self.rows:
                d = asdict(r)
                w.writerow([_fmt_cell(d[c]) for c in cols] + [_fmt_cell(r.extra.get(c, "")) for c in extra_cols])
        return path

    def to_text(self, by: Sequence[str] = ("kind", "model", "divergence")) -> str:
        agg = self.aggregate(by)
        header = list(by) + ["SMAPE", "MASE", "ms/iter", "n"]
        lines = [header]
        for a in agg:
            lines.append(
                [str(a[k]) for k in by]
                + [
                    f"{_fmt(a['smape'])} ± {_fmt(a['smape_std'])}",
                    f"{_fmt(a['mase'])} ± {_fmt(a['mase_std'])}",
                    _fmt(a["runtime_ms_per_iter"], 2),
                    str(a["n_rows"]),
                ]
            )
        widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
        out = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in lines]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"


def _fmt(v, digits: int = 3) -> str:
    if is_na(v) or (isinstance(v, float) and abs(v) > NA_THRESHOLD):
        return "NA"
    return f"{v:.{digits}f}"


def _fmt_cell(v):
    if isinstance(v, float):
        return "NA" if is_na(v) else repr(v)
    return v


def evaluate(
    model: NBeatsModel,
    scenario: Scenario,
    datasets: Mapping[str, DomainDataset],
    batch_size: int = 4096,
    model_name: str = "nbeats",
    divergence: str = "",
    split: str = "test",
) -> MetricsRow:
    """Score the target domain's split; metrics over concatenated predictions."""
    if scenario.target not in datasets:
        raise DataConfigError(f"target domain {scenario.target!r} has no dataset")
    ds = datasets[scenario.target]
    if ds.alpha != model.alpha or ds.beta != model.beta:
        raise DataConfigError(
            f"target windows are ({ds.alpha}, {ds.beta}) but the model expects ({model.alpha}, {model.beta})"
        )
    X, Y = ds.split(split)
    preds = predict(model, X, batch_size)
    return MetricsRow(
        scenario.name, scenario.kind, model_name, divergence, smape_metric(preds, Y), mase_metric(preds, Y), len(X)
    )


def evaluate_predictor(predict_fn: Callable[[np.ndarray], np.ndarray], scenario: Scenario, datasets, **row) -> MetricsRow:
    ds = datasets[scenario.target]
    X, Y = ds.split("test")
    preds = predict_fn(X)
    return MetricsRow(
        scenario.name, scenario.kind, row.get("model_name", "predictor"), row.get("divergence", ""),
        smape_metric(preds, Y), mase_metric(preds, Y), len(X),
    )


def runtime_probe(step: Callable[[], object], warmup: int = 1, reps: int = 5) -> float:
    """Median wall time of ``step`` in milliseconds after discarding warm-up calls."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    for _ in range(warmup):
        step()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        step()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(statistics.median(times))


def export_features(
    model: NBeatsModel,
    datasets: Mapping[str, DomainDataset],
    path: str | Path,
    normalizer: str = "softmax",
    n_per_domain: int = 256,
    split: str = "test",
) -> Path:
    """Write normalized per-stack feature samples with domain labels as long CSV."""
    from .align import normalize

    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        gamma = model.gamma
        w.writerow(["domain_id", "superdomain_id", "stack", "row"] + [f"z{j}" for j in range(gamma)])
        for dom, ds in datasets.items():
            X, _ = ds.split(split)
            X = X[:n_per_domain]
            if len(X) == 0:
                continue
            with nc.no_grad():
                res = model_forward_full(nc.Tensor(X), model)
                for m, tap in enumerate(res.taps):
                    Z = normalize(tap, normalizer).data
                    for i, z in enumerate(Z):
                        w.writerow([dom, ds.superdomain_id, m + 1, i] + [repr(float(v)) for v in z])
    return path

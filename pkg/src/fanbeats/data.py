"""Series ingestion, sliding windows, per-domain datasets, scenarios and synthetic domains."""

from __future__ import annotations

import csv
import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .numcore import Tensor

SPLIT_RATIOS = (0.7, 0.1, 0.2)
SCENARIO_KINDS = ("ODG", "CDG", "IDG")


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class DataConfigError(DataError):
    pass


@dataclass
class Series:
    series_id: str
    domain_id: str
    values: np.ndarray
    frequency: str = ""


@dataclass
class SeriesCollection:
    series: list[Series] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.series)

    def domains(self) -> list[str]:
        return list(OrderedDict.fromkeys(s.domain_id for s in self.series))

    def for_domain(self, domain_id: str) -> list[Series]:
        return [s for s in self.series if s.domain_id == domain_id]


# CSV --------------------------------------------------------------------------------

CSV_COLUMNS = ("series_id", "domain_id", "t", "value")


def _t_key(t: str):
    try:
        return (0, float(t), "")
    except ValueError:
        return (1, 0.0, t)


def load_series_csv(path: str | Path) -> SeriesCollection:
    """Read the long format ``series_id,domain_id,t,value[,frequency]``.

    Row order is kept within each series and ``t`` must increase strictly
    (numerically when it parses as a number, lexicographically otherwise).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    rows: OrderedDict[str, dict] = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return SeriesCollection()
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"{path}:1: missing columns {missing}")
        col = {name: header.index(name) for name in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, dom, t = row[col["series_id"]].strip(), row[col["domain_id"]].strip(), row[col["t"]].strip()
            try:
                v = float(row[col["value"]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: value {row[col['value']]!r} is not a number") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value")
            entry = rows.setdefault(sid, {"domain": dom, "t": [], "v": [], "freq": ""})
            if entry["domain"] != dom:
                raise ParseError(f"{path}:{lineno}: series {sid!r} changes domain from {entry['domain']!r} to {dom!r}")
            if entry["t"] and _t_key(t) <= _t_key(entry["t"][-1]):
                raise ParseError(f"{path}:{lineno}: t={t!r} does not increase within series {sid!r}")
            entry["t"].append(t)
            entry["v"].append(v)
            if "frequency" in col:
                entry["freq"] = row[col["frequency"]].strip()
    return SeriesCollection(
        [Series(sid, e["domain"], np.asarray(e["v"], dtype=np.float64), e["freq"]) for sid, e in rows.items()]
    )


def save_series_csv(collection: SeriesCollection, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS + ("frequency",))
        for s in collection.series:
            for t, v in enumerate(s.values):
                w.writerow([s.series_id, s.domain_id, t, repr(float(v)), s.frequency])
    return path


# windows ----------------------------------------------------------------------------


def make_windows(values, alpha: int, beta: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All ``(lookback, horizon)`` windows at offsets ``0, stride, 2*stride, ...``."""
    if alpha < 1 or beta < 1 or stride < 1:
        raise DataConfigError("alpha, beta and stride must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    n = max(0, (len(values) - alpha - beta) // stride + 1) if len(values) >= alpha + beta else 0
    if n == 0:
        return np.zeros((0, alpha)), np.zeros((0, beta))
    starts = np.arange(n) * stride
    idx = starts[:, None] + np.arange(alpha + beta)[None, :]
    win = values[idx]
    return win[:, :alpha].copy(), win[:, alpha:].copy()


@dataclass
class DomainDataset:
    domain_id: str
    superdomain_id: str
    X: np.ndarray
    Y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    origin: np.ndarray  # (series position, window offset) per instance
    with_replacement: bool = False

    @property
    def alpha(self) -> int:
        return self.X.shape[1]

    @property
    def beta(self) -> int:
        return self.Y.shape[1]

    def __len__(self) -> int:
        return len(self.X)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.X[idx], self.Y[idx]


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(SPLIT_RATIOS[0] * n))
    n_val = int(round(SPLIT_RATIOS[1] * n))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def build_domain_dataset(
    collection: SeriesCollection,
    domain_id: str,
    n_instances: int,
    seed: int = 0,
    alpha: int = 50,
    beta: int = 10,
    stride: int = 1,
    replace: bool = False,
    superdomain_id: str = "",
    split_by_series: bool = False,
) -> DomainDataset:
    """Pool the domain's windows, subsample ``n_instances`` and split 70/10/20.

    With ``split_by_series`` whole series are assigned to splits so no window
    of a test series is seen in training.
    """
    series = collection.for_domain(domain_id)
    xs, ys, origin = [], [], []
    for pos, s in enumerate(series):
        X, Y = make_windows(s.values, alpha, beta, stride)
        xs.append(X)
        ys.append(Y)
        origin.append(np.stack([np.full(len(X), pos), np.arange(len(X)) * stride], axis=1))
    pool = sum(len(x) for x in xs)
    if pool == 0:
        raise DataConfigError(f"domain {domain_id!r} yields no windows of size {alpha}+{beta}")
    X_all = np.concatenate(xs)
    Y_all = np.concatenate(ys)
    O_all = np.concatenate(origin).astype(np.int64)
    rng = np.random.default_rng(seed)
    if n_instances > pool and not replace:
        raise DataConfigError(
            f"domain {domain_id!r} has {pool} windows, {n_instances} requested "
            f"(shortfall {n_instances - pool}); enable sampling with replacement"
        )
    pick = rng.choice(pool, size=n_instances, replace=n_instances > pool)
    X, Y, O = X_all[pick], Y_all[pick], O_all[pick]
    if split_by_series:
        train, val, test = _split_by_series(O[:, 0], len(series), rng)
    else:
        perm = rng.permutation(n_instances)
        n_train, n_val, _ = split_sizes(n_instances)
        train, val, test = perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]
    return DomainDataset(
        domain_id, superdomain_id, X, Y, np.sort(train), np.sort(val), np.sort(test), O, n_instances > pool
    )


def _split_by_series(series_pos: np.ndarray, n_series: int, rng) -> tuple[np.ndarray, ...]:
    order = rng.permutation(n_series)
    n_train, n_val, _ = split_sizes(n_series)
    if n_series >= 3:
        n_train = min(max(n_train, 1), n_series - 2)
        n_val = max(n_val, 1)
    groups = (set(order[:n_train]), set(order[n_train : n_train + n_val]), set(order[n_train + n_val :]))
    return tuple(np.flatnonzero(np.isin(series_pos, list(g))) for g in groups)


def sample_batch(dataset: DomainDataset, split: str, B: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    X, Y = dataset.split(split)
    if len(X) == 0:
        raise DataConfigError(f"split {split!r} of domain {dataset.domain_id!r} is empty")
    idx = rng.integers(0, len(X), size=B)
    return Tensor(X[idx]), Tensor(Y[idx])


# scenarios --------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    kind: str
    sources: tuple[str, ...]
    target: str

    @property
    def name(self) -> str:
        return f"{self.kind}:{'+'.join(self.sources)}->{self.target}"


def _groups(superdomains: Mapping[str, str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = OrderedDict()
    for d, s in superdomains.items():
        out.setdefault(s, []).append(d)
    return out


def is_valid_scenario(sc: Scenario, superdomains: Mapping[str, str], p: int | None = None) -> bool:
    """Membership predicate for each scenario kind, independent of construction."""
    if sc.target not in superdomains or any(s not in superdomains for s in sc.sources):
        return False
    if len(set(sc.sources)) != len(sc.sources) or len(sc.sources) < 2 or sc.target in sc.sources:
        return False
    tgt = superdomains[sc.target]
    sups = [superdomains[s] for s in sc.sources]
    if sc.kind == "ODG":
        return len(set(sups)) == 1 and sups[0] != tgt
    if sc.kind == "IDG":
        return all(s == tgt for s in sups)
    if sc.kind == "CDG":
        same = sum(s == tgt for s in sups)
        others = {s for s in sups if s != tgt}
        ok = same >= 1 and len(others) == 1 and same < len(sups)
        return ok and (p is None or same == p - 1)
    return False


def enumerate_scenarios(superdomains: Mapping[str, str], kind: str, K: int = 3, p: int = 2) -> Iterator[Scenario]:
    """Every valid scenario of a kind, in sorted domain order."""
    if kind not in SCENARIO_KINDS:
        raise DataConfigError(f"unknown scenario kind {kind!r}")
    groups = _groups(superdomains)
    for target, tsup in superdomains.items():
        if kind == "IDG":
            pool = [d for d in groups[tsup] if d != target]
            for src in itertools.combinations(pool, K):
                yield Scenario(kind, src, target)
        elif kind == "ODG":
            for sup, members in groups.items():
                if sup == tsup:
                    continue
                for src in itertools.combinations(members, K):
                    yield Scenario(kind, src, target)
        else:
            same = [d for d in groups[tsup] if d != target]
            for sup, members in groups.items():
                if sup == tsup:
                    continue
                for a in itertools.combinations(same, p - 1):
                    for b in itertools.combinations(members, K - p + 1):
                        yield Scenario(kind, a + b, target)


def make_scenario(superdomains: Mapping[str, str], kind: str, target: str, K: int = 3, p: int = 2) -> Scenario:
    """First valid scenario for ``target`` in enumeration order."""
    if kind not in SCENARIO_KINDS:
        raise DataConfigError(f"unknown scenario kind {kind!r}")
    if target not in superdomains:
        raise DataConfigError(f"unknown target domain {target!r}")
    if kind == "CDG" and not 2 <= p <= K:
        raise DataConfigError(f"CDG needs 2 <= p <= K, got p={p}, K={K}")
    for sc in enumerate_scenarios(superdomains, kind, K, p):
        if sc.target == target:
            return sc
    raise DataConfigError(f"no {kind} scenario with K={K} sources exists for target {target!r}")


# synthetic domains ------------------------------------------------------------------


@dataclass
class DomainSpec:
    """Parameter ranges for one synthetic domain; per-series values are drawn uniformly."""

    domain_id: str
    superdomain_id: str
    n_series: int = 8
    length: int = 400
    level_range: tuple[float, float] = (1.0, 1.0)
    slope_range: tuple[float, float] = (0.0, 0.0)
    periods: tuple[float, ...] = ()
    amplitude_range: tuple[float, float] = (0.0, 0.0)
    noise_sigma: float = 0.0
    scale: float = 1.0
    frequency: str = ""


def synth_generate(spec: Sequence[DomainSpec], seed: int = 0) -> SeriesCollection:
    """scale * (level + slope*t + sum of sinusoids + Gaussian noise) per series."""
    if not spec:
        raise DataConfigError("synthetic spec lists no domains")
    rng = np.random.default_rng(seed)
    out = []
    for d in spec:
        t = np.arange(d.length, dtype=np.float64)
        for i in range(d.n_series):
            level = rng.uniform(*d.level_range)
            slope = rng.uniform(*d.slope_range)
            y = level + slope * t
            for period in d.periods:
                amp = rng.uniform(*d.amplitude_range)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                y = y + amp * np.sin(2.0 * np.pi * t / period + phase)
            if d.noise_sigma > 0:
                y = y + rng.normal(0.0, d.noise_sigma, size=d.length)
            out.append(Series(f"{d.domain_id}-{i:03d}", d.domain_id, d.scale * y, d.frequency))
    return SeriesCollection(out)


def desk_benchmark_spec(length: int = 400, n_series: int = 8) -> list[DomainSpec]:
    """Two superdomains of four domains each.

    ``fin`` domains are trend-dominated with weak long cycles; ``wx`` domains
    are strongly seasonal with little trend. Level ranges are disjoint across
    all eight domains, amplitude ranges are disjoint within a superdomain and
    each domain has its own periods. Scales differ by up to 100x within and
    across superdomains. Levels exceed the seasonal swing so series stay positive.
    """
    fin = [
        DomainSpec("commodity", "fin", n_series, length, (8, 10), (0.01, 0.03), (40.0,), (0.3, 0.5), 0.15, 1.0),
        DomainSpec("income", "fin", n_series, length, (10, 12), (0.03, 0.05), (60.0,), (0.1, 0.2), 0.10, 100.0),
        DomainSpec("interest", "fin", n_series, length, (6, 8), (-0.009, -0.005), (30.0,), (0.2, 0.3), 0.20, 1.0),
        DomainSpec("exchange", "fin", n_series, length, (12, 14), (-0.003, 0.003), (50.0,), (0.5, 0.6), 0.10, 10.0),
    ]
    wx = [
        DomainSpec("pressure", "wx", n_series, length, (14, 16), (0.0, 0.002), (12.0,), (1.5, 2.0), 0.20, 100.0),
        DomainSpec("rain", "wx", n_series, length, (4, 6), (-0.002, 0.0), (7.0, 14.0), (1.0, 1.5), 0.40, 1.0),
        DomainSpec("temperature", "wx", n_series, length, (16, 18), (0.0, 0.002), (24.0,), (2.5, 3.0), 0.20, 10.0),
        DomainSpec("wind", "wx", n_series, length, (18, 20), (-0.002, 0.002), (10.0, 20.0), (2.0, 2.5), 0.30, 1.0),
    ]
    return fin + wx


def superdomain_map(spec: Sequence[DomainSpec]) -> dict[str, str]:
    return OrderedDict((d.domain_id, d.superdomain_id) for d in spec)


def build_datasets(
    collection: SeriesCollection,
    superdomains: Mapping[str, str],
    n_instances: int,
    alpha: int,
    beta: int,
    seed: int = 0,
    replace: bool = False,
    split_by_series: bool = False,
) -> dict[str, DomainDataset]:
    out = OrderedDict()
    for k, (dom, sup) in enumerate(superdomains.items()):
        out[dom] = build_domain_dataset(
            collection, dom, n_instances, seed + 7919 * k, alpha, beta, 1, replace, sup, split_by_series
        )
    return out

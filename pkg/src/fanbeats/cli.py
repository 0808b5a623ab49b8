"""``fanbeats train|eval|ablate``: config resolution, data, training, reports.

Exit status: 0 ok, 1 usage or config error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from .align import AlignmentError
from .data import (
    DataError,
    build_datasets,
    desk_benchmark_spec,
    load_series_csv,
    make_scenario,
    superdomain_map,
    synth_generate,
)
from .evaluation import MetricsReport, MetricsRow, evaluate, export_features
from .model import ConfigError, build_model, load_checkpoint, save_checkpoint
from .numcore import DomainError
from .train import TrainingAborted, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

AXES = {
    "divergence": ("alignment.divergence", ["exact_w2", "sinkhorn", "mmd", "kl"]),
    "epsilon": ("sinkhorn.epsilon", [1e-5, 2.5e-3, 1e-1]),
    "normalizer": ("alignment.normalizer", ["softmax", "tanh", "none"]),
    "lambda": ("train.lambda", [0.1, 0.3, 1.0, 3.0]),
    "granularity": ("alignment.granularity", ["stack_wise", "block_wise"]),
}

MODEL_NAMES = {"generic": "N-BEATS-G", "interpretable": "N-BEATS-I", "nhits": "N-HiTS"}

log = logging.getLogger("fanbeats")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML file with [model], [train], ... tables")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="dotted override, e.g. train.lambda=0 or alignment.granularity=block_wise")
    common.add_argument("--profile", choices=sorted(C.PROFILES), default="paper")
    common.add_argument("--seeds", type=int, metavar="N", help="run seeds 0..N-1 instead of run.seeds")
    common.add_argument("--out", metavar="DIR", help="output directory (default run.out)")
    common.add_argument("--export-features", action="store_true", help="also write normalized feature taps as CSV")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fanbeats", description="Feature-aligned N-BEATS training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train one model per scenario and seed")
    ev = sub.add_parser("eval", parents=[common], help="score checkpoints, or train and compare lambda=0 with aligned")
    ev.add_argument("--checkpoint", action="append", default=[], metavar="PATH")
    ab = sub.add_parser("ablate", parents=[common], help="train and score a grid along one axis")
    ab.add_argument("--axis", choices=sorted(AXES), required=True)
    return p


def workers() -> int:
    raw = os.environ.get("FANBEATS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise C.UsageError(f"FANBEATS_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise C.UsageError(f"FANBEATS_THREADS must be >= 1, got {n}")
    return n


# data and scenarios -----------------------------------------------------------------


def load_data(cfg: dict, seed: int):
    d = cfg["data"]
    if d["csv"]:
        if not Path(d["csv"]).exists():
            raise FileNotFoundError(f"data file not found: {d['csv']}")
        collection = load_series_csv(d["csv"])
        pairs = [s.split(":", 1) for s in d["superdomains"]]
        if not pairs or any(len(p) != 2 for p in pairs):
            raise C.UsageError("data.superdomains must list domain:superdomain pairs when data.csv is set")
        superdomains = dict(pairs)
        unknown = sorted(set(collection.domains()) - set(superdomains))
        if unknown:
            raise DataError(f"domains {unknown} in {d['csv']} have no superdomain")
    else:
        spec = desk_benchmark_spec(length=d["synth_length"], n_series=d["synth_series"])
        collection = synth_generate(spec, seed=seed)
        superdomains = superdomain_map(spec)
    datasets = build_datasets(
        collection, superdomains, d["n_instances"], d["alpha"], d["beta"], seed=seed,
        replace=d["replace"], split_by_series=d["split_by_series"],
    )
    return superdomains, datasets


def scenarios(cfg: dict, superdomains) -> list:
    s = cfg["scenario"]
    return [make_scenario(superdomains, kind, t, s["K"], s["p"]) for kind in s["kinds"] for t in s["targets"]]


def seed_list(cfg: dict, n: int | None) -> list[int]:
    if n is not None:
        if n < 1:
            raise C.UsageError("--seeds must be >= 1")
        return list(range(n))
    return list(cfg["run"]["seeds"])


def new_model(cfg: dict, seed: int):
    m, d = cfg["model"], cfg["data"]
    try:
        return build_model(
            d["alpha"], d["beta"], m["gamma"], M=m["M"], L=m["L"], n_layers=m["n_layers"], variant=m["variant"],
            degree=m["degree"], n_harmonics=m["n_harmonics"], nhits_kernel=m["nhits_kernel"],
            legacy_residual=m["legacy_residual"], seed=seed, head_init=m["head_init"],
        )
    except ConfigError as exc:
        raise C.UsageError(str(exc)) from None


def fit(cfg: dict, scenario, datasets, seed: int, lam: float | None = None):
    tcfg = C.train_config(cfg, seed)
    if lam is not None:
        tcfg.lam = lam
    model = new_model(cfg, seed)
    t0 = time.perf_counter()
    model, history = train_loop([datasets[s] for s in scenario.sources], model, tcfg)
    ms = (time.perf_counter() - t0) * 1e3 / max(1, tcfg.iterations)
    return model, history, ms


def _row(model, scenario, datasets, name: str, cfg: dict, seed: int, ms: float, **extra) -> MetricsRow:
    row = evaluate(model, scenario, datasets, model_name=name, divergence=cfg["alignment"]["divergence"])
    row.seeds = str(seed)
    row.runtime_ms_per_iter = ms
    row.extra.update(extra)
    return row


def _out_dir(cfg: dict, args) -> Path:
    out = Path(args.out or cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(C.dumps(cfg))
    return out


def _finish(report: MetricsReport, out: Path, by=("kind", "model", "divergence")) -> None:
    report.to_csv(out / "report.csv")
    text = report.to_text(by)
    (out / "report.txt").write_text(text)
    print(text, end="")


# commands ---------------------------------------------------------------------------


def cmd_train(cfg: dict, args) -> int:
    out = _out_dir(cfg, args)
    name = MODEL_NAMES.get(cfg["model"]["variant"], cfg["model"]["variant"])
    report = MetricsReport()
    for seed in seed_list(cfg, args.seeds):
        superdomains, datasets = load_data(cfg, seed)
        for sc in scenarios(cfg, superdomains):
            run_dir = out / sc.name.replace(" ", "_") / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            model, history, ms = fit(cfg, sc, datasets, seed)
            save_checkpoint(model, run_dir / "checkpoint.npz")
            history.to_csv(run_dir / "history.csv")
            if args.export_features:
                export_features(model, datasets, run_dir / "features.csv", cfg["alignment"]["normalizer"])
            report.add(_row(model, sc, datasets, name, cfg, seed, ms, **{"lambda": cfg["train"]["lambda"]}))
            log.info("%s seed %d done", sc.name, seed)
    _finish(report, out)
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    out = _out_dir(cfg, args)
    report = MetricsReport()
    seeds = seed_list(cfg, args.seeds)
    if args.checkpoint:
        for seed in seeds:
            superdomains, datasets = load_data(cfg, seed)
            for path in args.checkpoint:
                model = load_checkpoint(path)
                for sc in scenarios(cfg, superdomains):
                    report.add(_row(model, sc, datasets, Path(path).stem, cfg, seed, float("nan")))
        _finish(report, out)
        return EXIT_OK
    name = MODEL_NAMES.get(cfg["model"]["variant"], cfg["model"]["variant"])
    lam = cfg["train"]["lambda"]
    for seed in seeds:
        superdomains, datasets = load_data(cfg, seed)
        for sc in scenarios(cfg, superdomains):
            base, _, ms0 = fit(cfg, sc, datasets, seed, lam=0.0)
            aligned, _, ms1 = fit(cfg, sc, datasets, seed)
            r0 = _row(base, sc, datasets, name, cfg, seed, ms0, **{"lambda": 0.0})
            r1 = _row(aligned, sc, datasets, f"FA-{name}", cfg, seed, ms1, **{"lambda": lam})
            r1.extra["smape_gain"] = r0.smape - r1.smape
            report.add(r0)
            report.add(r1)
            if args.export_features:
                export_features(aligned, datasets, out / f"features_{sc.kind}_{sc.target}_seed{seed}.csv",
                                cfg["alignment"]["normalizer"])
    _finish(report, out)
    return EXIT_OK


def _ablate_cell(cfg: dict, axis: str, value, seed: int) -> list[MetricsRow]:
    """Train and score every scenario for one grid value and seed; failures become NaN rows."""
    path, _ = AXES[axis]
    cell = C._merge(cfg, C.parse_override(f"{path}={value}"))
    name = MODEL_NAMES.get(cell["model"]["variant"], cell["model"]["variant"])
    superdomains, datasets = load_data(cell, seed)
    rows = []
    for sc in scenarios(cell, superdomains):
        try:
            model, _, ms = fit(cell, sc, datasets, seed)
            row = _row(model, sc, datasets, name, cell, seed, ms)
            row.extra["status"] = "ok"
        except (TrainingAborted, AlignmentError, DomainError, FloatingPointError, C.UsageError) as exc:
            row = MetricsRow(sc.name, sc.kind, name, cell["alignment"]["divergence"], float("nan"), float("nan"),
                             0, str(seed), extra={"status": f"failed: {exc}"})
        row.extra[axis] = value
        rows.append(row)
    return rows


def cmd_ablate(cfg: dict, args) -> int:
    out = _out_dir(cfg, args)
    _, grid = AXES[args.axis]
    cells = [(cfg, args.axis, v, s) for v in grid for s in seed_list(cfg, args.seeds)]
    n = min(workers(), len(cells))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(_ablate_cell, *zip(*cells)))
    else:
        results = [_ablate_cell(*c) for c in cells]
    report = MetricsReport()
    for rows in results:
        for r in rows:
            r.divergence = f"{args.axis}={r.extra[args.axis]}" if args.axis != "divergence" else r.divergence
            report.add(r)
    _finish(report, out)
    failed = [r for r in report.rows if r.extra.get("status", "ok") != "ok"]
    for r in failed:
        print(f"failed cell: {r.scenario} {r.divergence} seed {r.seeds}: {r.extra['status']}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = C.resolve(args.profile, args.config, args.overrides)
        if args.out:
            cfg["run"]["out"] = args.out
        if args.seeds is not None:
            cfg["run"]["seeds"] = seed_list(cfg, args.seeds)
        with threadpool_limits(limits=workers()):
            return COMMANDS[args.command](cfg, args)
    except (C.UsageError, ConfigError, AlignmentError) as exc:
        print(f"fanbeats: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"fanbeats: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, FloatingPointError, DomainError) as exc:
        print(f"fanbeats: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

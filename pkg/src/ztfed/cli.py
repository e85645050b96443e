"""Command-line experiment runner.

Subcommands: gen-data (synthetic farm CSVs), run (one protocol
execution), sweep (cartesian grid over declared axes, resumable), report
(mean(std) tables and sensitivity values from sweep output). All
commands are deterministic given the config file and seed. Exit codes:
0 success, 1 runtime failure, 2 invalid configuration or path.
"""

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import model as mas2s
from .aggregation import DtaaConfig
from .channel import CompressionConfig
from .data import MaskConfig, export_csv, load_csv, synth_wind
from .evaluation import AttackConfig, MiaConfig, build_mia_batches, mia_evaluate
from .federation import AGGREGATORS, FLConfig, prepare_client_data, run_experiment
from .privacy import DpConfig

logger = logging.getLogger(__name__)

__all__ = ["ExperimentSpec", "load_spec", "main"]

SWEEP_AXES = ("missing_rate", "prc", "epsilon", "anomaly_rate", "clients")


class ConfigError(Exception):
    pass


@dataclass
class DataSpec:
    source: str = "synth"  # synth | csv
    farms: int = 0  # 0: one farm per client
    samples_per_farm: int = 64
    csv_dir: str = ""

    def __post_init__(self):
        if self.source not in ("synth", "csv"):
            raise ConfigError("data.source must be 'synth' or 'csv'")


@dataclass
class SweepSpec:
    missing_rate: list = field(default_factory=list)
    prc: list = field(default_factory=list)  # proportion of continuous missing
    epsilon: list = field(default_factory=list)  # null entry means DP disabled
    anomaly_rate: list = field(default_factory=list)
    clients: list = field(default_factory=list)
    repeats: int = 1


@dataclass
class ExperimentSpec:
    federation: FLConfig = field(default_factory=FLConfig)
    model: mas2s.Mas2sConfig = field(default_factory=mas2s.Mas2sConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mia: MiaConfig = field(default_factory=MiaConfig)
    data: DataSpec = field(default_factory=DataSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0
    out: str = "results"


_SECTIONS = {
    "federation": FLConfig,
    "privacy": DpConfig,
    "compression": CompressionConfig,
    "trust": DtaaConfig,
    "model": mas2s.Mas2sConfig,
    "mask": MaskConfig,
    "attack": AttackConfig,
    "mia": MiaConfig,
    "data": DataSpec,
    "sweep": SweepSpec,
}


def _build_section(cls, raw: dict, section: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] config: {exc}") from exc


def load_spec(path: str | None) -> ExperimentSpec:
    """Parse the YAML config; unknown sections or keys are rejected."""
    raw = {}
    if path:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "out"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    fed_raw = dict(raw.get("federation", {}))
    for nested, section in (("dp", "privacy"), ("compression", "compression"), ("dtaa", "trust")):
        if section in raw:
            fed_raw[nested] = _build_section(_SECTIONS[section], dict(raw[section]), section)
    spec = ExperimentSpec(
        federation=_build_section(FLConfig, fed_raw, "federation"),
        model=_build_section(mas2s.Mas2sConfig, dict(raw.get("model", {})), "model"),
        mask=_build_section(MaskConfig, dict(raw.get("mask", {})), "mask"),
        attack=_build_section(AttackConfig, dict(raw.get("attack", {})), "attack"),
        mia=_build_section(MiaConfig, dict(raw.get("mia", {})), "mia"),
        data=_build_section(DataSpec, dict(raw.get("data", {})), "data"),
        sweep=_build_section(SweepSpec, dict(raw.get("sweep", {})), "sweep"),
        seed=int(raw.get("seed", 0)),
        out=str(raw.get("out", "results")),
    )
    return spec


def _apply_overrides(spec: ExperimentSpec, args: argparse.Namespace) -> ExperimentSpec:
    fed = spec.federation
    if getattr(args, "seed", None) is not None:
        spec.seed = args.seed
        fed = replace(fed, seed=args.seed)
    else:
        fed = replace(fed, seed=spec.seed)
    if getattr(args, "aggregator", None):
        fed = replace(fed, aggregator=args.aggregator)
    if getattr(args, "no_dp", False):
        fed = replace(fed, dp_enabled=False)
    if getattr(args, "no_nizk", False):
        fed = replace(fed, nizk_enabled=False)
    if getattr(args, "no_civ", False):
        fed = replace(fed, civ_enabled=False)
    if getattr(args, "no_compress", False):
        fed = replace(fed, compression_enabled=False)
    spec.federation = fed
    if getattr(args, "out", None):
        spec.out = args.out
    return spec


def _build_datasets(spec: ExperimentSpec):
    t_len = spec.model.sequence_length
    if spec.data.source == "csv":
        files = sorted(Path(spec.data.csv_dir).glob("*.csv"))
        if not files:
            raise ConfigError(f"no CSV files under {spec.data.csv_dir!r}")
        return [load_csv(f, t_len=t_len) for f in files]
    farms = spec.data.farms or spec.federation.clients
    return synth_wind(farms, spec.data.samples_per_farm, t_len=t_len, seed=spec.seed)


def _execute_run(spec: ExperimentSpec) -> dict:
    """One full protocol execution; returns the metrics payload."""
    # the mask channel joins the six features on the model input
    if spec.model.input_features != 7:
        spec.model = replace(spec.model, input_features=7)
    datasets = _build_datasets(spec)
    client_data = prepare_client_data(datasets, spec.mask, spec.federation.clients, seed=spec.seed)
    result = run_experiment(
        spec.federation, spec.model, client_data,
        attack=spec.attack if spec.attack.anomaly_rate > 0 else None,
    )
    members, nonmembers = build_mia_batches(client_data, spec.mia)
    params = mas2s.from_model_params(result.global_params)
    mia_sr, tau = mia_evaluate(params, spec.model, members, nonmembers, spec.mia)
    metrics = dict(result.metrics)
    metrics["mia_sr"] = mia_sr
    metrics["mia_threshold"] = tau
    metrics["_result"] = result
    return metrics


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not out.is_dir():
            raise OSError("not a directory")
    except OSError as exc:
        print(f"error: cannot use output path {args.out!r}: {exc}", file=sys.stderr)
        return 2
    datasets = synth_wind(args.farms, args.samples, t_len=args.seq_len, seed=args.seed)
    for ds in datasets:
        export_csv(ds, out / f"farm_{ds.farm_id:02d}.csv")
    total = sum(ds.samples for ds in datasets)
    print(f"wrote {len(datasets)} farm files to {out} ({total} windows of length {args.seq_len})")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        spec = _apply_overrides(load_spec(args.config), args)
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    metrics = _execute_run(spec)
    result = metrics.pop("_result")

    with open(out / "rounds.jsonl", "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, sort_keys=True, indent=2)
        fh.write("\n")
    mas2s.save_checkpoint(out / "model.ckpt", result.global_params, spec.model)
    print(
        f"run complete: rmse={metrics['rmse']:.4f} maape={metrics['maape']:.4f} "
        f"mia_sr={metrics['mia_sr']:.2f} co={metrics['communication_mb']:.3f}MB "
        f"-> {out}"
    )
    return 0


def _cell_seed(master_seed: int, index: int) -> int:
    raw = hashlib.sha256(f"{master_seed}/{index}".encode()).digest()
    return int.from_bytes(raw[:4], "big")


def _sweep_cells(spec: ExperimentSpec) -> list[dict]:
    axes = []
    for name in SWEEP_AXES:
        values = getattr(spec.sweep, name)
        if values:
            axes.append((name, list(values)))
    if not axes:
        axes = [("missing_rate", [spec.mask.total_rate])]
    cells = []
    index = 0
    for combo in itertools.product(*(vals for _, vals in axes)):
        assignment = dict(zip((name for name, _ in axes), combo))
        for rep in range(max(1, spec.sweep.repeats)):
            cells.append({"index": index, "rep": rep, **assignment})
            index += 1
    return cells


def _specialize(spec: ExperimentSpec, cell: dict) -> ExperimentSpec:
    fed, mask, attack = spec.federation, spec.mask, spec.attack
    if "missing_rate" in cell:
        mask = replace(mask, total_rate=float(cell["missing_rate"]))
    if "prc" in cell:
        mask = replace(mask, discrete_ratio=1.0 - float(cell["prc"]))
    if "epsilon" in cell:
        eps = cell["epsilon"]
        if eps is None or (isinstance(eps, (int, float)) and eps <= 0):
            fed = replace(fed, dp_enabled=False)
        else:
            fed = replace(fed, dp=replace(fed.dp, epsilon=float(eps)))
    if "anomaly_rate" in cell:
        attack = replace(attack, anomaly_rate=float(cell["anomaly_rate"]))
    if "clients" in cell:
        fed = replace(fed, clients=int(cell["clients"]))
    seed = _cell_seed(spec.seed, cell["index"])
    fed = replace(fed, seed=seed)
    return ExperimentSpec(
        federation=fed, model=replace(spec.model), mask=mask, attack=attack,
        mia=spec.mia, data=spec.data, sweep=spec.sweep, seed=seed, out=spec.out,
    )


def _run_cell(payload: tuple) -> dict:
    spec, cell = payload
    metrics = _execute_run(_specialize(spec, cell))
    metrics.pop("_result")
    metrics.pop("per_client", None)
    row = {k: cell.get(k) for k in ("index", "rep", *SWEEP_AXES)}
    row["seed"] = _cell_seed(spec.seed, cell["index"])
    row.update(
        {k: metrics[k] for k in ("mae", "rmse", "maape", "mia_sr", "communication_mb", "final_digest")}
    )
    return row


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        spec = _apply_overrides(load_spec(args.config), args)
        out = Path(spec.out)
        (out / "cells").mkdir(parents=True, exist_ok=True)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cells = _sweep_cells(spec)
    pending = []
    for cell in cells:
        cell_path = out / "cells" / f"cell_{cell['index']:04d}.json"
        if cell_path.exists():
            continue  # resumable: completed cells are skipped
        pending.append(cell)
    print(f"sweep: {len(cells)} cells, {len(pending)} to run")

    if args.jobs > 1 and pending:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, [(spec, c) for c in pending]))
    else:
        rows = [_run_cell((spec, c)) for c in pending]
    for cell, row in zip(pending, rows):
        cell_path = out / "cells" / f"cell_{cell['index']:04d}.json"
        with open(cell_path, "w") as fh:
            json.dump(row, fh, sort_keys=True, indent=2)

    all_rows = []
    for path in sorted((out / "cells").glob("cell_*.json")):
        with open(path) as fh:
            all_rows.append(json.load(fh))
    columns = ["index", "rep", *SWEEP_AXES, "seed", "mae", "rmse", "maape", "mia_sr", "communication_mb", "final_digest"]
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows({c: r.get(c) for c in columns} for r in all_rows)
    print(f"aggregated {len(all_rows)} rows -> {out / 'results.csv'}")
    return 0


def _mean_std(values: list[float]) -> str:
    import numpy as np

    arr = np.asarray(values, dtype=float)
    return f"{arr.mean():.4f}({arr.std(ddof=0):.4f})"


def cmd_report(args: argparse.Namespace) -> int:
    results = Path(args.results) / "results.csv"
    if not results.exists():
        print(f"error: no results found at {results}; run `ztfed sweep` first", file=sys.stderr)
        return 2
    with open(results) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("error: results.csv is empty", file=sys.stderr)
        return 2

    active_axes = [a for a in SWEEP_AXES if any(r.get(a) not in (None, "") for r in rows)]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = tuple(r.get(a) or "" for a in active_axes)
        groups.setdefault(key, []).append(r)

    lines = ["metric tables (mean(std) over repeats)", ""]
    header = [*active_axes, "mae", "rmse", "maape", "mia_sr"]
    lines.append("  ".join(f"{h:>12}" for h in header))
    ordered = sorted(groups.items(), key=lambda kv: kv[0])
    for key, members in ordered:
        cells = [f"{k:>12}" for k in key]
        for metric in ("mae", "rmse", "maape", "mia_sr"):
            cells.append(f"{_mean_std([float(m[metric]) for m in members]):>12}")
        lines.append("  ".join(cells))

    from .evaluation import sensitivity, utility

    for axis, label in (("missing_rate", "missing-rate"), ("prc", "continuous-proportion")):
        if axis in active_axes:
            pairs: dict[float, list[float]] = {}
            for r in rows:
                if r.get(axis) not in (None, ""):
                    pairs.setdefault(float(r[axis]), []).append(float(r["rmse"]))
            if len(pairs) >= 2:
                xs = sorted(pairs)
                means = [sum(pairs[x]) / len(pairs[x]) for x in xs]
                lines.append("")
                lines.append(f"rmse sensitivity to {label}: {sensitivity(xs, means):.4f}")

    if "epsilon" in active_axes:
        nodp = [r for r in rows if r.get("epsilon") in ("", "None", None)]
        if nodp:
            base = sum(float(r["maape"]) for r in nodp) / len(nodp)
            lines.append("")
            lines.append("utility vs epsilon:")
            eps_groups: dict[float, list[float]] = {}
            for r in rows:
                if r.get("epsilon") not in ("", "None", None):
                    eps_groups.setdefault(float(r["epsilon"]), []).append(float(r["maape"]))
            for eps in sorted(eps_groups):
                mean_maape = sum(eps_groups[eps]) / len(eps_groups[eps])
                lines.append(f"  epsilon={eps:g}: {utility(mean_maape, base):.2f}%")

    text = "\n".join(lines) + "\n"
    out = Path(args.out) if args.out else Path(args.results)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text)
    print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ztfed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="write synthetic per-farm CSV files")
    p_gen.add_argument("--out", default="data")
    p_gen.add_argument("--farms", type=int, default=16)
    p_gen.add_argument("--samples", type=int, default=64)
    p_gen.add_argument("--seq-len", type=int, default=96)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.set_defaults(func=cmd_gen_data)

    def add_run_flags(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--aggregator", choices=AGGREGATORS, default=None)
        p.add_argument("--no-dp", action="store_true")
        p.add_argument("--no-nizk", action="store_true")
        p.add_argument("--no-civ", action="store_true")
        p.add_argument("--no-compress", action="store_true")

    p_run = sub.add_parser("run", help="execute one federated experiment")
    add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the cartesian sweep grid")
    add_run_flags(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser("report", help="summarize sweep results")
    p_rep.add_argument("--results", required=True)
    p_rep.add_argument("--out", default=None)
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: ``estimate`` (fit on a CSV), ``simulate`` (replication study on
a shipped design), ``remainder`` (exact projection-remainder variances), and
``lattice`` (pattern-table diagnostics).  Machine-readable JSON goes to
stdout (or ``--out``); human diagnostics go to stderr.  Exit codes: 0 ok,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import simulation
from .data import Schema, ingest_csv
from .errors import BlockmissError, ConfigError, InvalidConfig
from .estfun import LinearRegression, OutcomeMean
from .estimators import (
    TRACE,
    Scalarization,
    cross_fit,
    naive_estimate,
    _jsonable,
)
from .patterns import (
    SCHEME_PS,
    SCHEME_RAY,
    WeightScheme,
    gamma_eta,
    mask_from_string,
    mask_to_string,
)
from .predictors import (
    EstimatingFunctionProxy,
    ImputationProxy,
    MeanProxy,
    PredictorBank,
    TableImputer,
    TablePointPredictor,
    load_prediction_table,
    train_linear_predictor,
)


def _emit(payload: dict, out_path: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _load_config(args) -> dict:
    config: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = json.load(fh)
    return config


def _schema_from_config(config: dict) -> Schema:
    raw = config.get("schema")
    if not raw:
        raise InvalidConfig("config needs a schema: {modality: [columns...]}")
    return Schema(
        modalities=tuple(raw.keys()),
        columns={k: tuple(v) for k, v in raw.items()},
    )


def _ef_from_config(config: dict, schema: Schema):
    spec = config.get("estimating_function", {"kind": "mean"})
    kind = spec.get("kind", "mean")
    if kind == "mean":
        return OutcomeMean(spec.get("outcome", schema.modalities[-1]))
    if kind == "ols":
        covs = tuple(spec.get("covariates", schema.modalities[:-1]))
        return LinearRegression.from_schema(
            schema, covs, spec.get("outcome", schema.modalities[-1])
        )
    raise InvalidConfig(f"unknown estimating function kind {kind!r}")


def _scalarization_from_config(config: dict) -> Scalarization:
    spec = config.get("scalarization")
    if not spec:
        return TRACE
    if spec.get("kind") == "contrast":
        return Scalarization("contrast", np.asarray(spec["c"], dtype=float))
    return TRACE


def _bank_from_config(config: dict, schema: Schema, ef, dataset) -> PredictorBank:
    spec = config.get("predictors", {})
    mode = spec.get("mode", "imputation")
    entries: dict[int, object] = {}
    required = schema.mask_of(ef.required_modalities)
    for key, entry in spec.get("entries", {}).items():
        r = mask_from_string(key)
        if r & required == required:
            entries[r] = EstimatingFunctionProxy(ef)
            continue
        if "file" in entry:
            values, cols = load_prediction_table(entry["file"])
            if mode == "expectation":
                if not isinstance(ef, OutcomeMean):
                    raise InvalidConfig(
                        "file-backed expectation mode is only defined for the mean target"
                    )
                point = TablePointPredictor(values=values, width=len(cols))
                entries[r] = MeanProxy(point)
            else:
                targets, dims = _targets_from_columns(schema, cols)
                imputer = TableImputer(targets=targets, target_dims=dims, values=values)
                entries[r] = ImputationProxy(imputer, ef)
        elif entry.get("fit") == "linear":
            observed = schema.names_of(r)
            if mode == "expectation":
                if not isinstance(ef, OutcomeMean):
                    raise InvalidConfig(
                        "fitted expectation mode is only defined for the mean target"
                    )
                point = train_linear_predictor(dataset, observed, (ef.outcome,))
                entries[r] = MeanProxy(point)
            else:
                targets = tuple(
                    name for name in ef.required_modalities if name not in observed
                )
                imputer = train_linear_predictor(dataset, observed, targets)
                entries[r] = ImputationProxy(imputer, ef)
        else:
            raise InvalidConfig(f"predictor entry for {key} needs 'file' or 'fit'")
    if spec.get("auto_residual", True):
        table = dataset.pattern_table(min_count=0)
        for r in table.augmentation_masks():
            if r not in entries and r & required == required:
                entries[r] = EstimatingFunctionProxy(ef)
    return PredictorBank(mode=mode, entries=entries, d=ef.d)


def cmd_estimate(args) -> int:
    config = _load_config(args)
    for name in ("data", "scheme", "seed", "level", "split"):
        value = getattr(args, name, None)
        if value is not None:
            config[name] = value
    if "data" not in config:
        raise InvalidConfig("no data path (flag --data or config key 'data')")
    schema = _schema_from_config(config)
    dataset = ingest_csv(config["data"], schema, config.get("na_tokens", ()))
    ef = _ef_from_config(config, schema)
    scheme = config.get("scheme", "ray")
    level = float(config.get("level", 0.95))
    if scheme == "naive":
        report = naive_estimate(dataset, ef, level=level)
    else:
        bank = _bank_from_config(config, schema, ef, dataset)
        report = cross_fit(
            dataset,
            ef,
            bank,
            scheme=scheme,
            scalarization=_scalarization_from_config(config),
            seed=int(config.get("seed", 0)),
            level=level,
            split=config.get("split", "stratified"),
        )
    _emit(report.to_dict(), args.out)
    return 0


def _targets_from_columns(schema: Schema, cols) -> tuple[tuple[str, ...], tuple[int, ...]]:
    by_modality: dict[str, list[str]] = {}
    for col in cols:
        owner = None
        for name in schema.modalities:
            if col in schema.columns[name]:
                owner = name
                break
        if owner is None:
            raise InvalidConfig(f"prediction column {col!r} matches no schema column")
        by_modality.setdefault(owner, []).append(col)
    targets = []
    dims = []
    for name in schema.modalities:
        if name in by_modality:
            if tuple(by_modality[name]) != tuple(schema.columns[name]):
                raise InvalidConfig(
                    f"prediction file must carry all columns of block {name!r} in schema order"
                )
            targets.append(name)
            dims.append(schema.dim_of(name))
    return tuple(targets), tuple(dims)


def cmd_simulate(args) -> int:
    config = _load_config(args)
    preset = args.preset or config.get("preset", "mean41")
    seed = int(args.seed if args.seed is not None else config.get("seed", 0))
    reps = int(args.reps if args.reps is not None else config.get("reps", 100))
    jobs = int(args.jobs if args.jobs is not None else config.get("jobs", 1))
    scenario = args.scenario or config.get("scenario", "correct")

    if preset == "mean41":
        design = simulation.MeanDesign()
    elif preset == "warmup":
        design = simulation.MeanDesign(
            n_complete=150, n_x1y=150, n_x1x2=600, n_x1=600, p1=2, p2=3
        )
    elif preset == "ols42":
        design = simulation.OLSDesign(n_complete=800, n_x1y=2000, n_x1x2=2000, n_x1=2000)
    else:
        raise InvalidConfig(f"unknown preset {preset!r}")

    if isinstance(design, simulation.OLSDesign):
        estimators = ("naive", "ibm_ps", "ibm_ray", "ibm_adaptive")
        plan = simulation.ReplicationPlan(
            design=design, estimators=estimators, ols_bank=simulation.ols_oracle_bank(design)
        )
    else:
        if scenario == "oracle":
            f, g = simulation.oracle_mean_points(design)
        else:
            train = simulation.MeanDesign(
                p1=design.p1, p2=design.p2, misspecified=scenario == "misspecified"
            )
            f, g = simulation.train_mean_points(train, train_seed=seed + 777_000)
        estimators = ("naive", "ppi", "ppi_pp", "ibm_ps", "ibm_ray", "ibm_adaptive")
        plan = simulation.ReplicationPlan(
            design=design, estimators=estimators, f_point=f, g_point=g
        )
    table = simulation.run_replications(plan, reps, seed, jobs=jobs)
    if args.out_csv:
        table.to_csv(args.out_csv)
    _emit(json.loads(table.to_json()), args.out)
    return 0


def _parse_grid(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InvalidConfig("grid must be start:stop:step or comma-separated")
        start, stop, step = (float(p) for p in parts)
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(p) for p in text.split(",")]


def cmd_remainder(args) -> int:
    grid = _parse_grid(args.rho_grid)
    props = tuple(float(p) for p in args.proportions.split(",")) if args.proportions else (0.25, 0.25, 0.25, 0.25)
    frame = simulation.remainder_study(grid, props, mc_draws=args.mc, seed=args.seed or 0)
    if args.out_csv:
        frame.to_csv(args.out_csv, index=False)
    _emit({"rows": frame.to_dict(orient="records")}, args.out)
    return 0


def cmd_lattice(args) -> int:
    config = _load_config(args)
    if args.schema_json:
        config["schema"] = json.loads(args.schema_json)
    schema = _schema_from_config(config)
    dataset = ingest_csv(args.data, schema, config.get("na_tokens", ()))
    table = dataset.pattern_table(min_count=0)
    M = schema.n_modalities
    report: dict = {
        "n_rows": dataset.n_rows,
        "patterns": {
            mask_to_string(m, M): {"count": c, "pi": p}
            for m, c, p in zip(table.masks, table.counts, table.pi)
        },
    }
    lam_masks = (
        range(1, 1 << M) if M <= 6 else table.masks
    )
    report["lambda"] = {
        mask_to_string(s, M): float(table.lam[s]) for s in lam_masks if table.lam[s] > 0
    }
    index = table.augmentation_masks()
    report["augmentation_patterns"] = [mask_to_string(r, M) for r in index]
    for kind in (SCHEME_PS, SCHEME_RAY):
        gamma, eta = gamma_eta(WeightScheme(kind), table, index)
        eig = np.linalg.eigvalsh((eta + eta.T) / 2) if len(index) else np.array([1.0])
        cond = float(eig.max() / eig.min()) if eig.min() > 0 else None
        report[kind] = {
            "gamma": gamma.tolist(),
            "eta": eta.tolist(),
            "eta_condition_number": cond,
        }
    _emit(_jsonable(report), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockmiss",
        description="Estimation and inference under blockwise missingness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", help="fit an estimator on a CSV dataset")
    p_est.add_argument("--config", help="JSON run configuration")
    p_est.add_argument("--data", help="CSV data path (overrides config)")
    p_est.add_argument("--scheme", choices=["naive", "ps", "ray", "adaptive"])
    p_est.add_argument("--seed", type=int)
    p_est.add_argument("--level", type=float)
    p_est.add_argument("--split", choices=["stratified", "plain"])
    p_est.add_argument("--out", help="write the JSON report here instead of stdout")
    p_est.set_defaults(func=cmd_estimate)

    p_sim = sub.add_parser("simulate", help="run a replication study on a preset design")
    p_sim.add_argument("--config")
    p_sim.add_argument("--preset", choices=["mean41", "ols42", "warmup"])
    p_sim.add_argument("--scenario", choices=["correct", "misspecified", "oracle"])
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--jobs", type=int)
    p_sim.add_argument("--out-csv")
    p_sim.add_argument("--out")
    p_sim.set_defaults(func=cmd_simulate)

    p_rem = sub.add_parser("remainder", help="exact remainder-variance study")
    p_rem.add_argument("--rho-grid", default="-0.4:0.8:0.1")
    p_rem.add_argument("--proportions", help="four comma-separated pattern proportions")
    p_rem.add_argument("--mc", type=int, default=0, help="Monte Carlo cross-check draws")
    p_rem.add_argument("--seed", type=int)
    p_rem.add_argument("--out-csv")
    p_rem.add_argument("--out")
    p_rem.set_defaults(func=cmd_remainder)

    p_lat = sub.add_parser("lattice", help="pattern-table diagnostics for a CSV")
    p_lat.add_argument("data", help="CSV data path")
    p_lat.add_argument("--config", help="JSON config carrying the schema")
    p_lat.add_argument("--schema-json", help="inline schema JSON {modality: [columns...]}")
    p_lat.add_argument("--out")
    p_lat.set_defaults(func=cmd_lattice)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BlockmissError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except FileNotFoundError as exc:
        sys.stdout.write(
            json.dumps({"error": "FileNotFound", "message": str(exc)}, sort_keys=True) + "\n"
        )
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())

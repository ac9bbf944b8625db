"""Command-line interface.

Subcommands cover estimation, evaluation, expected-flow extraction,
route prediction, proximity export, and the embedded toy reproduction.
Progress and diagnostics go to standard error; machine-readable results
go to files under --out (plus a run manifest, written even on failure).
Exit codes: 0 success, 2 invalid input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .context import ModelContext
from .estimation import EstimationConfig, Scenario, fit
from .exceptions import InputError, NumericError, RecLogitError
from .io import (
    load_params,
    load_trajectories,
    save_params,
)
from .metrics import MetricsReport, evaluate_model
from .model import LINK_SIZE_FEATURE, ModelKind, ModelParams, build_features
from .network import build_proximities, load_network
from .reproduce import run_toy_reproduction
from .solver import most_probable_route

logger = logging.getLogger("reclogit")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


def _configure_logging():
    level = os.environ.get("RECLOGIT_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        print(f"warning: unknown RECLOGIT_LOG={level!r}, using warn", file=sys.stderr)
        level = "warn"
    logging.basicConfig(
        stream=sys.stderr,
        level=LOG_LEVELS[level],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """Provenance record written alongside every command's outputs."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.record = {
            "tool": f"reclogit {__version__}",
            "command": command,
            "argv": {k: str(v) for k, v in vars(args).items() if k != "func" and v is not None},
            "seed": getattr(args, "seed", None),
            "inputs": {},
            "outputs": [],
            "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "status": "running",
            "error": None,
        }

    def add_input(self, path):
        if path:
            self.record["inputs"][str(path)] = _sha256(path)

    def add_output(self, path):
        self.record["outputs"].append(str(path))

    def finish(self, out_dir, status: str, error: str | None = None):
        self.record["finished"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.record["status"] = status
        self.record["error"] = error
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.record, fh, indent=2)
            fh.write("\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON config: {exc}") from exc


def initial_params_from_config(kind: ModelKind, graph, features, config: dict) -> ModelParams:
    """Assemble starting parameters for `estimate` from its JSON config."""
    names = list(config.get("features") or features.names)
    if kind is ModelKind.LSRL and LINK_SIZE_FEATURE not in names:
        names.append(LINK_SIZE_FEATURE)
    init = config.get("init") or {}
    init_phi = init.get("phi") or {}
    unknown = set(init_phi) - set(names)
    if unknown:
        raise InputError(f"init.phi names {sorted(unknown)} not among features {names}")
    phi = np.array([float(init_phi.get(n, 0.0)) for n in names])
    n = graph.link_count
    n_layers = int(config.get("n_layers", 1))
    theta = ()
    if kind in (ModelKind.RESRL, ModelKind.RESDGCNRL):
        raw = init.get("theta")
        if raw is None:
            theta = tuple(np.zeros((n, n)) for _ in range(n_layers))
        else:
            theta = tuple(np.asarray(layer, dtype=float) for layer in raw)
    scale_names = tuple(config.get("scale_features") or ())
    nrl_init = init.get("nrl_gamma") or {}
    return ModelParams(
        model_kind=kind,
        phi=phi,
        phi_names=tuple(names),
        mu=float(config.get("mu", 1.0)),
        theta=theta,
        alpha=float(init.get("alpha", 1.0)),
        beta=float(init.get("beta", 1.0)),
        gamma=float(init.get("gamma", 1.0)),
        nrl_gamma=np.array([float(nrl_init.get(n, 0.0)) for n in scale_names]),
        nrl_gamma_names=scale_names,
        frozen_phi=frozenset(config.get("frozen") or ()),
    )


def _scenario_from_files(args, config: dict) -> Scenario:
    graph = load_network(args.network)
    features = build_features(graph, config.get("features"))
    trajs = load_trajectories(args.trajs, graph)
    frac = float(config.get("validation_fraction", 0.0))
    if frac > 0:
        trajs = trajs.random_split((1.0 - frac, frac, 0.0), seed=args.seed)
    return Scenario(graph, features, trajs)


def cmd_estimate(args) -> int:
    manifest = RunManifest("estimate", args)
    out_dir = Path(args.out)
    try:
        config = _load_config(args.config)
        for path in (args.network, args.trajs, args.config):
            manifest.add_input(path)
        lam = float(config.get("lambda", 0.0))
        if lam < 0:
            raise InputError(f"penalty coefficient must be nonnegative, got {lam}")
        kind = ModelKind.coerce(args.model)
        scenario = _scenario_from_files(args, config)
        init = initial_params_from_config(kind, scenario.graph, scenario.features, config)
        est_config = EstimationConfig.from_dict({**config, "lambda": lam, "seed": args.seed})
        ls_coefficients = config.get("ls_coefficients")
        logger.info("fitting %s on %d trajectories", kind.value, len(scenario.trajectories))
        result = fit(scenario, init, est_config, ls_coefficients=ls_coefficients)
        out_dir.mkdir(parents=True, exist_ok=True)

        params_path = out_dir / "params.json"
        save_params(params_path, result.params)
        manifest.add_output(params_path)

        history_path = out_dir / "history.csv"
        with open(history_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "ll", "ei"])
            for row in result.history:
                writer.writerow([row["epoch"], repr(row["train_loss"]),
                                 "" if row["val_loss"] is None else repr(row["val_loss"]),
                                 repr(row["ll"]), repr(row["ei"])])
        manifest.add_output(history_path)

        report = {
            "model": kind.value,
            "final_ll": result.final_ll,
            "final_ei": result.history[-1]["ei"] if result.history else None,
            "final_loss": result.history[-1]["train_loss"] if result.history else None,
            "stopped_epoch": result.stopped_epoch,
            "converged": result.converged,
            "std_errors": result.std_errors,
            "config": est_config.to_dict(),
        }
        report_path = out_dir / "report.json"
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
        manifest.add_output(report_path)
        manifest.finish(out_dir, "ok")
        print(json.dumps({"final_ll": result.final_ll, "params": str(params_path)}))
        return 0
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)


def _fail(manifest: RunManifest, out_dir, exc: Exception) -> int:
    code = 3 if isinstance(exc, NumericError) else 2
    print(f"error: {exc}", file=sys.stderr)
    try:
        manifest.finish(out_dir, "error", str(exc))
    except OSError as io_exc:
        print(f"error: could not write manifest: {io_exc}", file=sys.stderr)
    return code


def _context_from_files(args, threads: int = 1):
    graph = load_network(args.network)
    params = load_params(args.params, graph=graph)
    features = build_features(graph)
    ls = getattr(args, "ls_coefficients", None)
    prox = build_proximities(graph) if params.model_kind is ModelKind.RESDGCNRL else None
    ctx = ModelContext(graph, features, params, prox=prox,
                       ls_coefficients=json.loads(ls) if ls else None)
    return graph, ctx


def _warm_destinations(ctx: ModelContext, pairs, threads: int):
    """Solve value functions for distinct ODs, optionally in a thread pool."""
    keys = sorted({(d, o if ctx.od_specific else None) for o, d in pairs})
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda k: ctx.choices(k[0], k[1]), keys))
    else:
        for dest, origin in keys:
            ctx.choices(dest, origin)


def cmd_evaluate(args) -> int:
    manifest = RunManifest("evaluate", args)
    out_dir = Path(args.out)
    try:
        for path in (args.network, args.trajs, args.params):
            manifest.add_input(path)
        graph, ctx = _context_from_files(args)
        trajs = load_trajectories(args.trajs, graph)
        _warm_destinations(ctx, [(p[0], p[-1]) for p in trajs.paths], args.threads)
        report = evaluate_model(trajs, ctx)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "metrics.json"
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json(indent=2))
            fh.write("\n")
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(MetricsReport.csv_header() + "\n")
            fh.write(report.to_csv_row(ctx.params.model_kind.value) + "\n")
        manifest.add_output(json_path)
        manifest.add_output(csv_path)
        manifest.finish(out_dir, "ok")
        print(report.to_json())
        return 0
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)


def cmd_flow(args) -> int:
    manifest = RunManifest("flow", args)
    out_dir = Path(args.out)
    try:
        manifest.add_input(args.network)
        manifest.add_input(args.params)
        graph, ctx = _context_from_files(args)
        origin = graph.index_of(args.origin)
        destination = graph.index_of(args.destination)
        flow = ctx.flow(origin, destination)
        conservation = abs(flow.F[destination] - 1.0)
        out_dir.mkdir(parents=True, exist_ok=True)
        flow_path = out_dir / "flow.csv"
        with open(flow_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["link_id", "value"])
            for link, value in zip(graph.links, flow.F):
                writer.writerow([link.link_id, repr(float(value))])
        manifest.add_output(flow_path)
        manifest.record["conservation_residual"] = conservation
        manifest.finish(out_dir, "ok")
        print(json.dumps({"flow_csv": str(flow_path), "conservation_residual": conservation}))
        return 0
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)


def cmd_predict(args) -> int:
    manifest = RunManifest("predict", args)
    out_dir = Path(args.out)
    try:
        manifest.add_input(args.network)
        manifest.add_input(args.params)
        manifest.add_input(args.ods)
        graph, ctx = _context_from_files(args)
        pairs = []
        with open(args.ods, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise InputError(f"{args.ods}: empty OD file")
            if [c.strip() for c in header[:2]] != ["origin", "destination"]:
                raise InputError(f"{args.ods}: expected header origin,destination")
            for row in reader:
                if len(row) >= 2:
                    pairs.append((graph.index_of(row[0].strip()), graph.index_of(row[1].strip())))
        _warm_destinations(ctx, [(o, d) for o, d in pairs], args.threads)
        out_dir.mkdir(parents=True, exist_ok=True)
        routes_path = out_dir / "routes.csv"
        n_ok = 0
        with open(routes_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["origin", "destination", "status", "route"])
            for origin, destination in pairs:
                try:
                    cm = ctx.choices(destination, origin)
                    route = most_probable_route(cm, origin, destination, args.max_steps)
                    status = "ok"
                    n_ok += 1
                except RecLogitError as exc:
                    route = getattr(exc, "partial", [])
                    status = "incomplete"
                writer.writerow([
                    graph.links[origin].link_id,
                    graph.links[destination].link_id,
                    status,
                    ";".join(graph.links[i].link_id for i in route),
                ])
        manifest.add_output(routes_path)
        manifest.finish(out_dir, "ok" if n_ok == len(pairs) else "partial")
        print(json.dumps({"routes_csv": str(routes_path), "generated": n_ok, "requested": len(pairs)}))
        return 0 if n_ok or not pairs else 3
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)


def cmd_export_proximities(args) -> int:
    manifest = RunManifest("export-proximities", args)
    out_dir = Path(args.out)
    try:
        manifest.add_input(args.network)
        graph = load_network(args.network)
        prox = build_proximities(graph)
        out_dir.mkdir(parents=True, exist_ok=True)
        ids = [ln.link_id for ln in graph.links]
        for name, matrix in (
            ("z_first", prox.z_first),
            ("z_second_in", prox.z_second_in),
            ("z_second_out", prox.z_second_out),
        ):
            path = out_dir / f"{name}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["link_id"] + ids)
                for lid, row in zip(ids, matrix):
                    writer.writerow([lid] + [repr(float(v)) for v in row])
            manifest.add_output(path)
        manifest.finish(out_dir, "ok")
        print(json.dumps({"outputs": manifest.record["outputs"]}))
        return 0
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)


def cmd_reproduce_toy(args) -> int:
    manifest = RunManifest("reproduce-toy", args)
    out_dir = Path(args.out)
    try:
        reproduction = run_toy_reproduction()
    except RecLogitError as exc:
        return _fail(manifest, out_dir, exc)
    table = reproduction.table()
    print(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / "toy_table.txt"
    table_path.write_text(table + "\n", encoding="utf-8")
    manifest.add_output(table_path)
    report_path = out_dir / "toy_report.json"
    doc = {
        "checks": reproduction.checks,
        "log_likelihoods": {m: reproduction.results[m].final_ll for m in reproduction.results},
        "path_shares": reproduction.shares,
        "all_passed": reproduction.all_passed,
    }
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    manifest.add_output(report_path)
    manifest.finish(out_dir, "ok" if reproduction.all_passed else "mismatch")
    return 0 if reproduction.all_passed else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reclogit",
        description="Link-based route choice models: estimation, evaluation, and analysis.",
    )
    parser.add_argument("--version", action="version", version=f"reclogit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, network=True, params=False, out=True):
        if network:
            p.add_argument("--network", required=True, help="network CSV (link_id,tail_node,head_node,...)")
        if params:
            p.add_argument("--params", required=True, help="fitted parameter JSON")
        if out:
            p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, default=42, help="seed for all randomness (default 42)")
        p.add_argument("--threads", type=int, default=1, help="worker cap for per-destination solves")

    p = sub.add_parser("estimate", help="fit a model by penalized maximum likelihood")
    common(p)
    p.add_argument("--trajs", required=True, help="trajectory CSV")
    p.add_argument("--config", help="estimation config JSON")
    p.add_argument("--model", required=True, choices=[k.value for k in ModelKind])
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="score a fitted model on a trajectory set")
    common(p, params=True)
    p.add_argument("--trajs", required=True, help="trajectory CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "flow",
        help="expected link flows for one OD pair",
        description="Writes per-link expected flows under unit demand as CSV. "
        "Values are raw flows; display transforms such as log(1 + 10000*F) "
        "are left to the consumer.",
    )
    common(p, params=True)
    p.add_argument("--origin", required=True, help="origin link id")
    p.add_argument("--destination", required=True, help="destination link id")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("predict", help="greedy most-probable routes for an OD list")
    common(p, params=True)
    p.add_argument("--ods", required=True, help="CSV with header origin,destination (link ids)")
    p.add_argument("--max-steps", type=int, default=None, help="step cap per route")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-proximities", help="write the three normalized proximity matrices")
    common(p)
    p.set_defaults(func=cmd_export_proximities)

    p = sub.add_parser("reproduce-toy", help="train all three models on the embedded toy example")
    common(p, network=False)
    p.set_defaults(func=cmd_reproduce_toy)

    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()

"""Command-line entry points tying ingestion, fitting, calibration packing,
the simulation study, and the pack service into reproducible runs.

Exit codes: 0 success, 1 fit did not pass the convergence gates, 2 input error.
Every command writes a manifest recording inputs (with content hashes), seeds,
outputs, and timings; timings vary between runs, so the manifest is the one
output excluded from byte-level reproducibility comparisons.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import calibration as calib
from . import ratio_prediction as ratio
from .dataset import (
    DatasetError,
    attach_pooled_ratios,
    camera_ratio_table,
    load_species_table,
    load_trips,
)
from .inference import PosteriorDraws, SamplerConfig, diagnostics_report, run_mcmc
from .modelgraph import ModelConfig, ModelConfigError, build_model
from .simulation import SimulationError, assign_sim_parameters, run_capture_study

EXIT_OK = 0
EXIT_NONCONVERGED = 1
EXIT_INPUT = 2


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: list[Path], outputs: list[Path], seed: int,
                    elapsed: float) -> None:
    manifest = {
        "command": command,
        "arguments": {k: str(v) for k, v in vars(args).items() if v is not None},
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs if p.exists()},
        "outputs": [str(p) for p in outputs],
        "elapsed_seconds": elapsed,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _load_trip_data(args: argparse.Namespace):
    trips = load_trips(args.trips)
    table = None
    if args.species and args.registry:
        table = load_species_table(args.species, args.registry)
        if any(t.pooled_ratio is None for t in trips):
            trips = attach_pooled_ratios(trips, table)
    elif any(t.pooled_ratio is None for t in trips):
        raise DatasetError(
            "trips lack pooled ratios; supply --species and --registry to compute them"
        )
    return trips, table


def _model_config(args: argparse.Namespace) -> ModelConfig:
    if getattr(args, "model_config", None):
        return ModelConfig.from_file(args.model_config)
    return ModelConfig.final()


def _sampler_config(args: argparse.Namespace) -> SamplerConfig:
    cfg = (
        SamplerConfig.from_file(args.sampler_config)
        if getattr(args, "sampler_config", None)
        else SamplerConfig()
    )
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_fit(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    trips, _ = _load_trip_data(args)
    model_cfg = _model_config(args)
    sampler_cfg = _sampler_config(args)
    graph = build_model(model_cfg, trips)
    draws = run_mcmc(graph, sampler_cfg)
    report = diagnostics_report(graph, draws)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    draws_path = out / "draws.csv"
    draws.to_csv(draws_path)
    diag_path = out / "diagnostics.json"
    diag_path.write_text(json.dumps(report, sort_keys=True, indent=1))
    config_path = out / "model-config.txt"
    config_path.write_text(model_cfg.to_text())

    inputs = [Path(args.trips)]
    if args.species:
        inputs += [Path(args.species), Path(args.registry)]
    _write_manifest(
        out, "fit", args, inputs, [draws_path, diag_path, config_path],
        sampler_cfg.seed, time.perf_counter() - t0,
    )
    if not report["converged"]:
        print(
            f"fit did not converge: worst R-hat {report['worst_rhat']:.3f} "
            f"(gate {report['rhat_gate']}), min ESS {report['min_ess']:.0f} "
            f"(gate {report['ess_gate']:.0f})",
            file=sys.stderr,
        )
        return EXIT_NONCONVERGED
    print(
        f"fit converged: worst R-hat {report['worst_rhat']:.3f}, "
        f"min ESS {report['min_ess']:.0f}; draws at {draws_path}"
    )
    return EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    trips, table = _load_trip_data(args)
    draws = PosteriorDraws.from_csv(args.draws)
    missing = [tid for tid in (t.trip_id for t in trips) if tid not in draws.trip_ids]
    if missing:
        raise DatasetError(f"draws do not cover trips {missing}")

    paired = {}
    paired_failures: dict[str, str] = {}
    if table is not None:
        ratios = camera_ratio_table(table, trips)
        paired, paired_failures = ratio.fit_all_ratio_regressions(trips, ratios)

    model_cfg = _model_config(args)
    pack = calib.build_pack(
        draws,
        trips,
        paired,
        model_config_hash=model_cfg.config_hash(),
        seed=args.seed if args.seed is not None else draws.seed,
    )
    for cam, reason in {**pack.skipped_cameras, **paired_failures}.items():
        print(f"warning: camera {cam}: {reason}", file=sys.stderr)

    doc = pack.to_json_dict()
    calib.validate_pack(doc)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pack.save(out_path)

    inputs = [Path(args.trips), Path(args.draws)]
    if args.species:
        inputs += [Path(args.species), Path(args.registry)]
    _write_manifest(
        out_path.parent, "pack", args, inputs, [out_path],
        pack.provenance["seed"], time.perf_counter() - t0,
    )
    print(f"pack written to {out_path} ({len(doc['cameras'])} cameras)")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    t0 = time.perf_counter()
    if args.n_datasets < 1:
        raise SimulationError("--n-datasets must be >= 1")
    trips, _ = _load_trip_data(args)
    final_draws = PosteriorDraws.from_csv(args.final_draws)
    true_params = assign_sim_parameters(final_draws, trips)
    sampler_cfg = _sampler_config(args)
    report = run_capture_study(
        true_params,
        trips,
        n_datasets=args.n_datasets,
        nominal=args.nominal,
        sampler_config=sampler_cfg,
        replication=args.replication,
        jitter_sd=args.jitter_sd,
    )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "capture-table.txt"
    table_path.write_text(report.render_text() + "\n")
    json_path = out / "capture-report.json"
    payload = report.to_json_dict()
    payload["true_params"] = {
        "values": true_params.values,
        "provenance": true_params.provenance,
    }
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=1))

    _write_manifest(
        out, "simulate", args, [Path(args.trips), Path(args.final_draws)],
        [table_path, json_path], sampler_cfg.seed, time.perf_counter() - t0,
    )
    print(report.render_text())
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import ServiceConfig, serve

    config = ServiceConfig(
        pack_path=Path(args.pack),
        host=args.host,
        port=args.port,
        cors_origins=tuple(args.cors or ()),
    )
    serve(config)
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gearcalib",
        description="Cross-gear calibration of fish abundance survey data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--trips", required=True, help="trips.csv")
        p.add_argument("--species", help="species.csv (long format per-species MaxN)")
        p.add_argument("--registry", help="registry.csv (species flags)")

    p_fit = sub.add_parser("fit", help="fit a model and write posterior draws")
    add_data_args(p_fit)
    p_fit.add_argument("--model-config", help="key=value model configuration file")
    p_fit.add_argument("--sampler-config", help="key=value sampler configuration file")
    p_fit.add_argument("--seed", type=int, help="override the sampler seed")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.set_defaults(func=cmd_fit)

    p_pack = sub.add_parser("pack", help="build a calibration pack from draws")
    add_data_args(p_pack)
    p_pack.add_argument("--draws", required=True, help="draws.csv from fit")
    p_pack.add_argument("--model-config", help="model config used for the fit")
    p_pack.add_argument("--seed", type=int, help="seed recorded in provenance")
    p_pack.add_argument("--out", required=True, help="output pack path (JSON)")
    p_pack.set_defaults(func=cmd_pack)

    p_sim = sub.add_parser("simulate", help="run the capture-rate simulation study")
    add_data_args(p_sim)
    p_sim.add_argument("--final-draws", required=True, help="draws.csv from the reduced-model fit")
    p_sim.add_argument("--n-datasets", type=int, required=True)
    p_sim.add_argument("--nominal", type=float, default=0.90)
    p_sim.add_argument("--replication", type=int, default=6)
    p_sim.add_argument("--jitter-sd", type=float, default=0.27)
    p_sim.add_argument("--sampler-config", help="sampler configuration for replicate fits")
    p_sim.add_argument("--seed", type=int, help="master seed")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_srv = sub.add_parser("serve", help="serve a calibration pack over HTTP")
    p_srv.add_argument("--pack", required=True)
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=8250)
    p_srv.add_argument("--cors", action="append", help="allowed CORS origin (repeatable)")
    p_srv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        DatasetError,
        ModelConfigError,
        SimulationError,
        calib.CalibrationError,
        ratio.RatioRegressionError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``hprofile {simulate,profile,sensitivity,composite,classical}``.

Every run writes its outputs plus ``manifest.json`` into ``--out``. The
manifest echoes the resolved configuration and the SHA-256 of every input
and output file. Exit codes: 0 success, 2 input error, 3 non-convergence
(outputs are still written and marked).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .classical import (
    coefficient_table,
    fit_logistic_mle,
    oe_standardized,
    variation_indices,
    write_table,
    z_outliers,
)
from .composite import (
    IrtKind,
    all_or_none,
    fit_irt,
    icc_data,
    panel_from_patients,
    pooled_composite,
    read_panel_csv,
    read_patient_csv,
)
from .errors import InputError, ProfilingError
from .hiermodel import SHIPPED_PRIORS, HierSpec, PriorSpec
from .profiling import (
    IN_CONTROL_TAU,
    PRACTICAL_DIFFERENCE_PP,
    build_profile,
    scatter_data,
    sensitivity_suite,
    write_caterpillar_csv,
    write_scatter_csv,
    write_sensitivity_csv,
)
from .registry import emit_csv, ingest_csv, load_coefficients, load_targets, summarize, synthesize_cohort
from .sampler import ChainConfig

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 2, 3
ICC_GRID = np.linspace(-3.0, 3.0, 61)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config is not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise InputError("config must be a JSON object")
    return obj


def _chain_config(args, config) -> ChainConfig:
    cfg = ChainConfig.from_json(config.get("chains", {}))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _model_spec(args, config) -> HierSpec:
    spec = HierSpec.from_json(
        {
            "tau_prior": config.get("prior", PriorSpec.gamma().to_json()),
            "mu_prior_var": config.get("mu_prior_var", 1000.0),
            "beta_prior_var": config.get("beta_prior_var", 1000.0),
        }
    )
    if args.tau_fixed is not None:
        spec = HierSpec(PriorSpec.fixed(args.tau_fixed), spec.mu_prior_var, spec.beta_prior_var)
    return spec


def _threads(args, config) -> int:
    t = args.threads if args.threads is not None else int(config.get("threads", 1))
    if t < 1:
        raise InputError("--threads must be >= 1")
    return t


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {path}")
    return p


class _Run:
    """Tracks inputs and outputs of one command for the manifest."""

    def __init__(self, args):
        self.command = args.command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.status: dict = {}

    def add_input(self, path) -> Path:
        p = _require_file(path)
        self.inputs[str(path)] = _sha256(p)
        return p

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def finish(self, exit_code: int) -> int:
        manifest = {
            "tool": "hprofile",
            "version": __version__,
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": {name: _sha256(self.out / name) for name in sorted(self.outputs)},
            "status": {**self.status, "exit_code": exit_code},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return exit_code


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    run = _Run(args)
    config = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    targets_path = args.targets or config.get("targets")
    coef_path = args.coefficients or config.get("coefficients")
    if targets_path:
        run.add_input(targets_path)
    if coef_path:
        run.add_input(coef_path)
    targets = load_targets(targets_path)
    volume = args.volume if args.volume is not None else config.get("volume")
    if volume is not None:
        if int(volume) < 1:
            raise InputError("--volume must be >= 1")
        targets = targets.with_volume(int(volume))
    intercept, coef = load_coefficients(coef_path)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    run.config = {
        "targets": targets_path or "shipped:massachusetts",
        "coefficients": coef_path or "shipped:massachusetts",
        "volume": volume,
        "seed": seed,
    }
    synth = synthesize_cohort(targets, intercept, coef, seed)
    emit_csv(synth.cohort, run.path("cohort.csv"))
    run.write_json("cohort_metadata.json", synth.metadata)
    run.write_json(
        "cohort_summary.json",
        [asdict(s) for s in summarize(synth.cohort)],
    )
    run.status = {"patients": synth.cohort.n_patients, "hospitals": synth.cohort.n_hospitals}
    return run.finish(EXIT_OK)


def _classical_outputs(run: _Run, cohort) -> dict:
    fit = fit_logistic_mle(cohort)
    z = z_outliers(fit, cohort)
    oe = oe_standardized(fit, cohort)
    write_table(z, run.path("classical_z.csv"))
    write_table(oe, run.path("classical_oe.csv"))
    with run.path("classical_coefficients.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("term", "estimate", "se", "odds_ratio"), lineterminator="\n")
        w.writeheader()
        for row in coefficient_table(fit):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    vi = variation_indices(cohort.deaths_by_hospital() / cohort.volumes(), cohort.volumes())
    summary = {
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik": fit.loglik,
        "z_flagged": [h for h, f in zip(z.hospital_ids, z.flag) if f],
        "oe_flagged": [h for h, f in zip(oe.hospital_ids, oe.flag) if f],
        "variation": {
            "extremal_quotient": None if vi.eq_infinite else vi.extremal_quotient,
            "extremal_quotient_infinite": vi.eq_infinite,
            "coefficient_of_variation": vi.coefficient_of_variation,
            "systematic_component": vi.systematic_component,
        },
    }
    run.write_json("classical_summary.json", summary)
    return summary


def cmd_classical(args) -> int:
    run = _Run(args)
    cohort = ingest_csv(run.add_input(args.cohort))
    run.config = {"cohort": str(args.cohort)}
    summary = _classical_outputs(run, cohort)
    run.status = {"converged": summary["converged"]}
    return run.finish(EXIT_OK if summary["converged"] else EXIT_NONCONVERGED)


def cmd_profile(args) -> int:
    run = _Run(args)
    config = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    cohort = ingest_csv(run.add_input(args.cohort))
    spec = _model_spec(args, config)
    cfg = _chain_config(args, config)
    threads = _threads(args, config)
    anchor = args.anchor if args.anchor is not None else config.get("anchor")
    crossval = bool(args.crossval or config.get("crossval", False))
    in_control = float(config.get("in_control_tau", IN_CONTROL_TAU))
    practical = float(config.get("practical_pp", PRACTICAL_DIFFERENCE_PP))
    run.config = {
        "cohort": str(args.cohort),
        "model": spec.to_json(cfg.seed),
        "chains": cfg.to_json(),
        "anchor": anchor if anchor is not None else "pooled",
        "crossval": crossval,
        "in_control_tau": in_control,
        "practical_pp": practical,
        "threads": threads,
    }
    _classical_outputs(run, cohort)
    report, draws = build_profile(
        spec, cohort, cfg, anchor=anchor, in_control_tau=in_control, crossval=crossval,
        practical_pp=practical, threads=threads,
    )
    report.write_json(run.path("report.json"))
    report.write_csv(run.path("report.csv"))
    write_caterpillar_csv(report, run.path("caterpillar.csv"))
    write_scatter_csv(scatter_data(draws, cohort), run.path("scatter.csv"), cfg.seed, report.config_sha256)
    draws.write_summary_json(run.path("posterior_summary.json"))
    run.status = {
        "converged": draws.converged,
        "max_rhat": draws.metadata.get("max_rhat"),
        "config_sha256": report.config_sha256,
    }
    return run.finish(EXIT_OK if draws.converged is not False else EXIT_NONCONVERGED)


def cmd_sensitivity(args) -> int:
    run = _Run(args)
    config = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    cohort = ingest_csv(run.add_input(args.cohort))
    if "priors" in config:
        if not isinstance(config["priors"], list):
            raise InputError("config field 'priors' must be a list")
        priors = [PriorSpec.from_json(p) for p in config["priors"]]
    else:
        priors = list(SHIPPED_PRIORS)
    if not priors:
        raise InputError("config field 'priors' is empty")
    cfg = _chain_config(args, config)
    threads = _threads(args, config)
    run.config = {
        "cohort": str(args.cohort),
        "priors": [p.to_json() for p in priors],
        "chains": cfg.to_json(),
        "threads": threads,
    }
    rows = sensitivity_suite(cohort, priors, cfg, threads=threads)
    write_sensitivity_csv(rows, run.path("sensitivity.csv"))
    converged = all(r.converged is not False for r in rows)
    run.status = {"converged": converged}
    return run.finish(EXIT_OK if converged else EXIT_NONCONVERGED)


def cmd_composite(args) -> int:
    run = _Run(args)
    config = _load_config(args.config)
    if args.config:
        run.add_input(args.config)
    if bool(args.panel) == bool(args.patients):
        raise InputError("give exactly one of --panel or --patients")
    model = args.model or config.get("model", "pooled")
    if model not in ("pooled", "all_or_none", "rasch", "two_pl"):
        raise InputError(f"unknown composite model {model!r}")
    records = None
    if args.panel:
        panel = read_panel_csv(run.add_input(args.panel))
    else:
        records = read_patient_csv(run.add_input(args.patients))
        panel = panel_from_patients(records)
    cfg = _chain_config(args, config)
    run.config = {
        "panel": args.panel,
        "patients": args.patients,
        "model": model,
        "chains": cfg.to_json() if model in ("rasch", "two_pl") else None,
    }
    exit_code = EXIT_OK
    if model == "pooled":
        pc = pooled_composite(panel)
        payload = {
            "model": model,
            "threshold": pc.threshold,
            "hospitals": [
                {"hospital_id": h, "rate": float(r), "top": bool(t)}
                for h, r, t in zip(pc.hospital_ids, pc.rates, pc.top)
            ],
        }
    elif model == "all_or_none":
        if records is None:
            raise InputError("the all-or-none rule needs patient-level rows (--patients)")
        rates = all_or_none(records)
        payload = {
            "model": model,
            "hospitals": [{"hospital_id": h, "rate": (None if np.isnan(r) else r)} for h, r in rates.items()],
        }
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = fit_irt(panel, IrtKind(model), cfg)
        payload = {"seed": cfg.seed, **fit.to_json(), "warnings": [str(w.message) for w in caught]}
        curves = icc_data(fit, ICC_GRID)
        with run.path("icc.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["measure_id", "theta", "probability"])
            for m, p in curves.items():
                for t, v in zip(ICC_GRID, p):
                    w.writerow([m, repr(float(t)), repr(float(v))])
        if fit.draws.converged is False:
            exit_code = EXIT_NONCONVERGED
        run.status = {"converged": fit.draws.converged}
    run.write_json("composite.json", payload)
    return run.finish(exit_code)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="random seed (overrides the config)")
    shared.add_argument("--out", required=True, help="output directory")
    shared.add_argument("--config", help="JSON configuration file")
    shared.add_argument("--threads", type=int, help="maximum worker threads for chains and folds")
    shared.add_argument("--crossval", action="store_true", help="add leave-one-hospital-out p-values")
    shared.add_argument("--tau-fixed", type=float, help="hold tau fixed at this value")
    shared.add_argument("--anchor", type=float, help="anchor rate in percent (default: pooled rate)")

    parser = argparse.ArgumentParser(prog="hprofile", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared], help="generate a synthetic cohort")
    p.add_argument("--targets", help="calibration targets JSON (default: shipped set)")
    p.add_argument("--coefficients", help="risk model JSON (default: shipped set)")
    p.add_argument("--volume", type=int, help="override every hospital's volume")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("profile", parents=[shared], help="hierarchical profiling report")
    p.add_argument("cohort", help="cohort CSV")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("sensitivity", parents=[shared], help="posterior summaries under several priors")
    p.add_argument("cohort", help="cohort CSV")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("composite", parents=[shared], help="composite process-measure scores")
    p.add_argument("--panel", help="panel CSV: hospital_id, measure_id, numerator, denominator")
    p.add_argument("--patients", help="patient CSV: hospital_id, patient_id, measure_id, eligible, received")
    p.add_argument("--model", choices=("pooled", "all_or_none", "rasch", "two_pl"))
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("classical", parents=[shared], help="fixed-effects logistic model and classical indices")
    p.add_argument("cohort", help="cohort CSV")
    p.set_defaults(func=cmd_classical)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"hprofile: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ProfilingError as exc:
        print(f"hprofile: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Subcommands: simulate, fit, reproduce-fig1, reproduce-bias-mse, diagnose.
A key = value config file can preload any option; explicit flags override
file values.  Exit code 0 on success; on hard failure a one-line JSON error
summary goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import ContractViolation, ParseError
from .experiments import (
    ExperimentPlan,
    diagnose_study,
    fit_single,
    run_bias_mse,
    run_fig1,
    write_csv,
)
from .model import Covariance
from .pooled import EmConfig
from .simgen import StudyConfig, export_study, generate_study, load_site_file, load_study

_LIST_FLOAT = "list_float"
_LIST_INT = "list_int"
_LIST_STR = "list_str"

# Union of recognized config keys (StudyConfig + ExperimentPlan + run options).
CONFIG_SCHEMA = {
    # StudyConfig
    "n_sites": int,
    "site_size": int,
    "dim": int,
    "heterogeneity": float,
    "noise_variance": float,
    "mean1": _LIST_FLOAT,
    "mean0": _LIST_FLOAT,
    "seed": int,
    "replications": int,
    # ExperimentPlan
    "sites": _LIST_INT,
    "site_sizes": _LIST_INT,
    "noise_variances": _LIST_FLOAT,
    "heterogeneities": _LIST_FLOAT,
    "estimators": _LIST_STR,
    "out_dir": str,
    "workers": int,
    "iterations": int,
    # fit options
    "estimator": str,
    "max_iterations": int,
    "tolerance": float,
    "restarts": int,
    # diagnose constants
    "c0": float,
    "c1": float,
    "cw": float,
    "rep": int,
}


def load_config(path) -> dict:
    """Parse a key = value config file against the schema."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(
                    f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}",
                    path=str(path),
                    line=lineno,
                )
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in CONFIG_SCHEMA:
                raise ParseError(
                    f"{path}:{lineno}: unknown key {key!r}", path=str(path), line=lineno
                )
            kind = CONFIG_SCHEMA[key]
            try:
                if kind is int:
                    values[key] = int(value)
                elif kind is float:
                    values[key] = float(value)
                elif kind is str:
                    values[key] = value
                elif kind == _LIST_FLOAT:
                    values[key] = tuple(float(v) for v in value.split(",") if v.strip())
                elif kind == _LIST_INT:
                    values[key] = tuple(int(v) for v in value.split(",") if v.strip())
                elif kind == _LIST_STR:
                    values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}: cannot parse value for {key!r}: {value!r}",
                    path=str(path),
                    line=lineno,
                ) from None
    return values


def _setting(args, config: dict, key: str, default):
    """Precedence: explicit flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


def _study_config(args, config) -> StudyConfig:
    return StudyConfig(
        n_sites=_setting(args, config, "n_sites", 10),
        site_size=_setting(args, config, "site_size", 1000),
        dim=_setting(args, config, "dim", 5),
        heterogeneity=_setting(args, config, "heterogeneity", 0.1),
        noise_variance=_setting(args, config, "noise_variance", 2.5),
        mean1=_setting(args, config, "mean1", None),
        mean0=_setting(args, config, "mean0", None),
        seed=_setting(args, config, "seed", 0),
        replications=_setting(args, config, "replications", 200),
    )


def _plan(args, config) -> ExperimentPlan:
    return ExperimentPlan(
        sites=_setting(args, config, "sites", (10,)),
        site_sizes=_setting(args, config, "site_sizes", (1000,)),
        noise_variances=_setting(args, config, "noise_variances", (2.5, 5.0)),
        heterogeneities=_setting(args, config, "heterogeneities", (0.1, 0.3)),
        replications=_setting(args, config, "reps", None)
        or _setting(args, config, "replications", 200),
        estimators=_setting(
            args, config, "estimators", ("local", "average", "pooled", "distributed")
        ),
        out_dir=str(_setting(args, config, "out", None) or _setting(args, config, "out_dir", "results")),
        seed=_setting(args, config, "seed", 0),
        workers=_setting(args, config, "workers", 1),
        iterations=_setting(args, config, "iterations", 50),
    )


def _em_config(args, config) -> EmConfig:
    return EmConfig(
        max_iterations=_setting(args, config, "max_iterations", 500),
        tolerance=_setting(args, config, "tolerance", 1e-8),
        seed=_setting(args, config, "seed", 0),
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_simulate(args, config) -> int:
    cfg = _study_config(args, config)
    rep = _setting(args, config, "rep", 0)
    out = Path(_setting(args, config, "out", None) or _setting(args, config, "out_dir", "study"))
    datasets, truth = generate_study(cfg, rep)
    export_study(datasets, truth, cfg, rep, out)
    print(f"wrote {cfg.n_sites} site files and study.json to {out}")
    return 0


def _load_fit_inputs(args, config):
    if args.study_dir is not None:
        datasets, _, cfg, _ = load_study(args.study_dir)
        variance = _setting(args, config, "noise_variance", cfg.noise_variance)
        return datasets, Covariance.isotropic(variance, cfg.dim, cfg.n_sites)
    if not args.site_files:
        raise ContractViolation("pass site CSV files or --study-dir")
    datasets = [load_site_file(p) for p in args.site_files]
    datasets = sorted(datasets, key=lambda d: d.site_id)
    variance = _setting(args, config, "noise_variance", None)
    if variance is None:
        raise ContractViolation("--noise-variance is required with bare site files")
    dim = datasets[0].dim
    return datasets, Covariance.isotropic(variance, dim, len(datasets))


def _cmd_fit(args, config) -> int:
    datasets, cov = _load_fit_inputs(args, config)
    estimator = _setting(args, config, "estimator", "distributed")
    result = fit_single(
        datasets,
        cov,
        estimator,
        _em_config(args, config),
        restarts=_setting(args, config, "restarts", 5),
    )
    out = Path(_setting(args, config, "out", None) or _setting(args, config, "out_dir", "fit"))
    out.mkdir(parents=True, exist_ok=True)

    header = ("component", *[f"x{i + 1}" for i in range(result.means.shape[1])])
    body = [(c, *[float(v) for v in result.means[c]]) for c in range(result.means.shape[0])]
    write_csv(out / "estimates.csv", header, body)
    if result.params is not None:
        write_csv(
            out / "mixing.csv",
            ("site", "lam"),
            [(j, float(v)) for j, v in enumerate(result.params.lam)],
        )
    elif result.site_mixing is not None:
        write_csv(
            out / "mixing.csv",
            ("site", "lam"),
            [(j, result.site_mixing[j]) for j in sorted(result.site_mixing)],
        )
    if result.trace is not None:
        write_csv(
            out / "trace.csv",
            ("iteration", "log_likelihood", "step_distance"),
            [
                (r.iteration, r.log_likelihood, r.step_distance)
                for r in result.trace.records
            ],
        )
    if result.ledger is not None:
        write_csv(
            out / "comm.csv",
            ("round", "uplink_bytes", "downlink_bytes", "uplink_messages", "downlink_messages"),
            [
                (t.round_index, t.uplink_bytes, t.downlink_bytes,
                 t.uplink_messages, t.downlink_messages)
                for t in result.ledger.rounds()
            ],
        )
    print(f"{estimator} fit written to {out}")
    return 0


def _cmd_fig1(args, config) -> int:
    plan = _plan(args, config)
    path = run_fig1(plan)
    print(f"wrote {path}")
    return 0


def _cmd_bias_mse(args, config) -> int:
    plan = _plan(args, config)
    path = run_bias_mse(plan)
    print(f"wrote {path}")
    return 0


def _cmd_diagnose(args, config) -> int:
    cfg = _study_config(args, config)
    out = diagnose_study(
        cfg,
        replication=_setting(args, config, "rep", 0),
        c0=_setting(args, config, "c0", 0.1),
        c1=_setting(args, config, "c1", 0.75),
        cw=_setting(args, config, "cw", 0.1),
    )
    report = out["report"]
    print(f"separation (snr): {out['snr']!r}")
    print(str(report))
    out_dir = _setting(args, config, "out", None)
    if out_dir is not None:
        rows = [("snr", float(out["snr"])), ("distance", report.distance),
                ("radius", report.radius), ("passed", int(report.passed))]
        rows += [(f"term_{k}", float(v)) for k, v in report.terms.items()]
        rows += [(f"const_{k}", float(v)) for k, v in report.constants.items()]
        write_csv(Path(out_dir) / "diagnose.csv", ("quantity", "value"), rows)
        print(f"wrote {Path(out_dir) / 'diagnose.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--workers", type=int, help="parallel workers over replications")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmix",
        description="Multi-site Gaussian mixture estimation without pooling raw data",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate and export one synthetic study")
    _add_common(p)
    p.add_argument("--rep", type=int, help="replication index (default 0)")
    p.add_argument("--n-sites", dest="n_sites", type=int)
    p.add_argument("--site-size", dest="site_size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heterogeneity", type=float)
    p.add_argument("--noise-variance", dest="noise_variance", type=float)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit one estimator to exported site files")
    _add_common(p)
    p.add_argument("site_files", nargs="*", help="site CSV files")
    p.add_argument("--study-dir", type=Path, help="exported study directory")
    p.add_argument("--estimator",
                   choices=("local", "average", "pooled", "distributed"))
    p.add_argument("--noise-variance", dest="noise_variance", type=float,
                   help="shared isotropic variance (required for bare site files)")
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--restarts", type=int)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser(
        "reproduce-fig1",
        help="pooled-vs-distributed approximation error traces over the grid",
    )
    _add_common(p)
    p.add_argument("--reps", type=int, help="replications per cell")
    p.add_argument("--iterations", type=int, help="trace length (default 50)")
    p.add_argument("--sites", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--site-sizes", dest="site_sizes",
                   type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--noise-variances", dest="noise_variances",
                   type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--heterogeneities",
                   type=lambda s: tuple(float(v) for v in s.split(",")))
    p.set_defaults(func=_cmd_fig1)

    p = sub.add_parser(
        "reproduce-bias-mse",
        help="bias/variance/MSE of all estimators over the grid",
    )
    _add_common(p)
    p.add_argument("--reps", type=int, help="replications per cell")
    p.add_argument("--estimators",
                   type=lambda s: tuple(v.strip() for v in s.split(",")))
    p.add_argument("--sites", type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--site-sizes", dest="site_sizes",
                   type=lambda s: tuple(int(v) for v in s.split(",")))
    p.add_argument("--noise-variances", dest="noise_variances",
                   type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--heterogeneities",
                   type=lambda s: tuple(float(v) for v in s.split(",")))
    p.set_defaults(func=_cmd_bias_mse)

    p = sub.add_parser("diagnose", help="separation and initialization-radius report")
    _add_common(p)
    p.add_argument("--rep", type=int)
    p.add_argument("--n-sites", dest="n_sites", type=int)
    p.add_argument("--site-size", dest="site_size", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heterogeneity", type=float)
    p.add_argument("--noise-variance", dest="noise_variance", type=float)
    p.add_argument("--c0", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--cw", type=float)
    p.set_defaults(func=_cmd_diagnose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config) if args.config else {}
        return args.func(args, config)
    except Exception as exc:  # hard failures surface as machine-readable summaries
        summary = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(summary), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

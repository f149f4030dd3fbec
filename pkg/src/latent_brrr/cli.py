"""Command-line interface.

Subcommands: simulate, fit, predict, cv, assoc, verify. Every run writes a
manifest (command, resolved config, input digests, version, wall time) to
the output directory before any results; primary outputs are byte-identical
across reruns with the same inputs and seeds, manifests excluded.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from latent_brrr import __version__
from latent_brrr import io as lio
from latent_brrr.errors import ConfigurationError, NumericalError
from latent_brrr.evaluate import mse, permutation_test
from latent_brrr.gibbs import run_chain
from latent_brrr.model import Dataset, Dims, resolve_sigma_omega
from latent_brrr.simulate import SimConfig, generate
from latent_brrr.theory import (
    check_prop1,
    check_prop2,
    default_geweke_config,
    gamma_ratio_two_down,
    gamma_ratio_two_down_direct,
    geweke_test,
    truncation_deficit,
)
from latent_brrr.tuning import cross_validate


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-brrr",
        description="Bayesian reduced-rank regression with latent structured noise",
    )
    parser.add_argument("--version", action="version", version=f"latent-brrr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic train/test replicate")
    sim.add_argument("--alpha", type=float, default=1.0)
    sim.add_argument("--n-train", type=int, default=2000)
    sim.add_argument("--n-test", type=int, default=15000)
    sim.add_argument("--p", type=int, default=30, help="number of covariates")
    sim.add_argument("--k", type=int, default=60, help="number of targets")
    sim.add_argument("--rank", type=int, default=3)
    sim.add_argument("--var-signal", type=float, default=0.03)
    sim.add_argument("--var-diag", type=float, default=0.20)
    sim.add_argument("--var-structured", type=float, default=0.77)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out-dir", type=Path, required=True)

    fit = sub.add_parser("fit", help="run the Gibbs sampler on a dataset")
    fit.add_argument("--x", type=Path, required=True)
    fit.add_argument("--y", type=Path, required=True)
    fit.add_argument("--config", type=Path, required=True, help="model config JSON")
    fit.add_argument("--samples", action="store_true",
                     help="also write raw retained states to samples.bin")
    fit.add_argument("--out-dir", type=Path, required=True)

    pred = sub.add_parser("predict", help="mean predictions from a fitted summary")
    pred.add_argument("--x", type=Path, required=True)
    pred.add_argument("--model", type=Path, required=True, help="posterior_summary.json")
    pred.add_argument("--y", type=Path, default=None, help="targets for scoring (optional)")
    pred.add_argument("--out-dir", type=Path, required=True)

    cv = sub.add_parser("cv", help="cross-validate the latent-SNR and rank grids")
    cv.add_argument("--x", type=Path, required=True)
    cv.add_argument("--y", type=Path, required=True)
    cv.add_argument("--config", type=Path, required=True)
    cv.add_argument("--plan", type=Path, required=True, help="CV plan JSON")
    cv.add_argument("--threads", type=int, default=None)
    cv.add_argument("--out-dir", type=Path, required=True)

    assoc = sub.add_parser("assoc", help="permutation association test (PTVE)")
    assoc.add_argument("--x", type=Path, required=True)
    assoc.add_argument("--y", type=Path, required=True)
    assoc.add_argument("--config", type=Path, required=True)
    assoc.add_argument("--n-perm", type=int, default=100)
    assoc.add_argument("--threads", type=int, default=None)
    assoc.add_argument("--out-dir", type=Path, required=True)

    verify = sub.add_parser("verify", help="Monte-Carlo proposition and sampler checks")
    verify.add_argument("--prop1", action="store_true")
    verify.add_argument("--prop2", action="store_true")
    verify.add_argument("--geweke", action="store_true")
    verify.add_argument("--a1", type=float, default=3.0)
    verify.add_argument("--a2", type=float, default=4.0)
    verify.add_argument("--nu", type=float, default=3.0)
    verify.add_argument("--p", type=int, default=30)
    verify.add_argument("--var-x", type=float, default=1.0)
    verify.add_argument("--truncation", type=int, default=50)
    verify.add_argument("--draws", type=int, default=1_000_000)
    verify.add_argument("--prop1-tolerance", type=float, default=0.05,
                        help="pass tolerance as a fraction of the analytic value")
    verify.add_argument("--prop2-ranks", type=int, nargs="+", default=[1, 2, 3])
    verify.add_argument("--geweke-iters", type=int, default=100_000)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out-dir", type=Path, required=True)

    return parser


def _thread_count(requested: int | None) -> int:
    env = os.environ.get("LATENT_BRRR_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(
                f"LATENT_BRRR_THREADS must be an integer, got {env!r}"
            ) from None
    if requested is not None:
        return max(1, requested)
    return os.cpu_count() or 1


def _require_file(path: Path) -> Path:
    # A missing input is a usage error (exit 2), not an I/O failure.
    if not Path(path).is_file():
        raise ConfigurationError(f"missing input file: {path}")
    return path


def _load_dataset(x_path: Path, y_path: Path) -> Dataset:
    X, x_names = lio.read_matrix_csv(_require_file(x_path))
    Y, y_names = lio.read_matrix_csv(_require_file(y_path))
    lio.check_matrix_finite(X, x_path, x_names)
    lio.check_matrix_finite(Y, y_path, y_names)
    return Dataset(X=X, Y=Y, x_names=tuple(x_names), y_names=tuple(y_names))


def _run_with_manifest(out_dir: Path, command: str, config_dict: dict,
                       input_paths: dict[str, Path], worker) -> None:
    """Write the manifest first, run the worker, then finalize the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {name: lio.file_digest(_require_file(path))
               for name, path in input_paths.items()}
    manifest = out_dir / "manifest.json"
    lio.write_manifest(manifest, command, config_dict, digests, status="incomplete")
    start = time.perf_counter()
    try:
        extras = worker() or {}
    except BaseException as exc:
        lio.write_manifest(manifest, command, config_dict, digests, status="failed",
                           wall_time_seconds=time.perf_counter() - start,
                           error=str(exc))
        raise
    lio.write_manifest(manifest, command, config_dict, digests, status="ok",
                       wall_time_seconds=time.perf_counter() - start, extras=extras)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> None:
    config = SimConfig(
        alpha=args.alpha, n_train=args.n_train, n_test=args.n_test,
        n_covariates=args.p, n_targets=args.k, rank=args.rank,
        var_signal=args.var_signal, var_diag=args.var_diag,
        var_structured=args.var_structured, seed=args.seed,
    )
    out = args.out_dir

    def worker():
        train, test, truth = generate(config)
        x_names = [f"x{j}" for j in range(config.n_covariates)]
        y_names = [f"y{j}" for j in range(config.n_targets)]
        lio.write_matrix_csv(out / "X_train.csv", train.X, x_names)
        lio.write_matrix_csv(out / "Y_train.csv", train.Y, y_names)
        lio.write_matrix_csv(out / "X_test.csv", test.X, x_names)
        lio.write_matrix_csv(out / "Y_test.csv", test.Y, y_names)
        lio.write_json(out / "truth.json", {
            "Psi": truth.Psi.tolist(),
            "Gamma": truth.Gamma.tolist(),
            "Lambda": truth.Lambda.tolist(),
            "theta": truth.theta.tolist(),
            "omega_scale": truth.omega_scale,
            "h_scale": truth.h_scale,
            "noise_sd": truth.noise_sd,
            "alpha": truth.alpha,
            "realized_fractions": list(truth.realized_fractions),
        })

    _run_with_manifest(out, "simulate", vars(config).copy(), {}, worker)


def _summarize(stack: np.ndarray) -> dict:
    return {"mean": stack.mean(axis=0).tolist(),
            "sd": stack.std(axis=0, ddof=1).tolist()}


def cmd_fit(args) -> None:
    dataset = _load_dataset(args.x, args.y)
    config = lio.model_config_from_dict(lio.read_json(_require_file(args.config)))
    resolved = resolve_sigma_omega(config, dataset.X)
    out = args.out_dir

    def worker():
        trace = run_chain(dataset, resolved)
        samples = trace.samples
        states = samples.states
        summaries = {
            "Psi": _summarize(np.stack([s.Psi for s in states])),
            "Gamma": _summarize(np.stack([s.Gamma for s in states])),
            "delta": _summarize(np.stack([s.delta for s in states])),
            "tau": _summarize(np.stack([s.tau for s in states])),
            "sigma_sq": _summarize(np.stack([s.sigma_sq for s in states])),
        }
        lio.write_json(out / "posterior_summary.json", {
            "config": lio.model_config_to_dict(samples.config),
            "theta_mean": samples.theta_mean.tolist(),
            "parameter_summaries": summaries,
            "n_retained": len(states),
        })
        if args.samples:
            lio.write_samples(out / "samples.bin", samples)
        return {"wall_time_by_update": trace.wall_time_seconds}

    _run_with_manifest(out, "fit", lio.model_config_to_dict(resolved),
                       {"x": args.x, "y": args.y, "config": args.config}, worker)


def cmd_predict(args) -> None:
    X, x_names = lio.read_matrix_csv(_require_file(args.x))
    lio.check_matrix_finite(X, args.x, x_names)
    summary = lio.read_json(_require_file(args.model))
    theta = np.asarray(summary.get("theta_mean"), dtype=float)
    if theta.ndim != 2 or X.shape[1] != theta.shape[0]:
        raise ConfigurationError(
            f"model expects {theta.shape[0] if theta.ndim == 2 else '?'} covariates, "
            f"X has {X.shape[1]} columns"
        )
    out = args.out_dir
    inputs = {"x": args.x, "model": args.model}
    if args.y is not None:
        inputs["y"] = args.y

    def worker():
        predictions = X @ theta
        lio.write_matrix_csv(out / "Y_pred.csv", predictions, prefix="y")
        report: dict = {"n_rows": int(X.shape[0]), "n_targets": int(theta.shape[1])}
        if args.y is not None:
            Y, y_names = lio.read_matrix_csv(_require_file(args.y))
            lio.check_matrix_finite(Y, args.y, y_names)
            total, per_target = mse(predictions, Y)
            report["mse_total"] = total
            report["mse_per_target"] = per_target.tolist()
        else:
            report["mse_total"] = None
            report["mse_per_target"] = None
        lio.write_json(out / "eval.json", report)

    _run_with_manifest(out, "predict", {"model": str(args.model)}, inputs, worker)


def cmd_cv(args) -> None:
    dataset = _load_dataset(args.x, args.y)
    config = lio.model_config_from_dict(lio.read_json(_require_file(args.config)))
    plan = lio.cv_plan_from_dict(lio.read_json(_require_file(args.plan)))
    threads = _thread_count(args.threads)
    out = args.out_dir

    def worker():
        best, table = cross_validate(dataset, config, plan, n_threads=threads)
        n_folds = plan.n_folds
        with open(out / "score_table.csv", "w", encoding="utf-8") as fh:
            fold_cols = ",".join(f"fold{f}_mse" for f in range(n_folds))
            fh.write(f"beta,rank,mean_mse,status,{fold_cols}\n")
            for row in table:
                beta = "" if row["beta"] is None else f"{row['beta']:.17g}"
                folds = ",".join(f"{v:.17g}" for v in row["fold_mse"])
                fh.write(f"{beta},{row['rank']},{row['mean_mse']:.17g},"
                         f"{row['status']},{folds}\n")
        lio.write_json(out / "best_config.json", lio.model_config_to_dict(best))

    _run_with_manifest(
        out, "cv",
        {"model_config": lio.model_config_to_dict(config), "plan": vars(plan).copy(),
         "threads": threads},
        {"x": args.x, "y": args.y, "config": args.config, "plan": args.plan}, worker)


def cmd_assoc(args) -> None:
    dataset = _load_dataset(args.x, args.y)
    config = lio.model_config_from_dict(lio.read_json(_require_file(args.config)))
    threads = _thread_count(args.threads)
    out = args.out_dir

    def worker():
        rng = np.random.default_rng(config.seed)
        result = permutation_test(dataset, config, args.n_perm, rng,
                                  n_threads=threads)
        payload = result.as_dict()
        payload["n_perm"] = args.n_perm
        lio.write_json(out / "assoc.json", payload)

    _run_with_manifest(
        out, "assoc",
        {"model_config": lio.model_config_to_dict(config), "n_perm": args.n_perm,
         "threads": threads},
        {"x": args.x, "y": args.y, "config": args.config}, worker)


def cmd_verify(args) -> None:
    if not (args.prop1 or args.prop2 or args.geweke):
        raise ConfigurationError("verify needs at least one of --prop1/--prop2/--geweke")
    out = args.out_dir
    config_echo = {
        "a1": args.a1, "a2": args.a2, "nu": args.nu, "p": args.p,
        "var_x": args.var_x, "truncation": args.truncation, "draws": args.draws,
        "prop2_ranks": args.prop2_ranks, "geweke_iters": args.geweke_iters,
        "seed": args.seed,
    }

    def worker():
        propositions = {}
        if args.prop1:
            rng = np.random.default_rng(args.seed)
            report = check_prop1(args.a1, args.a2, args.nu, args.p,
                                 var_x=args.var_x, truncation=args.truncation,
                                 n_draws=args.draws, rng=rng, tolerance=0.0)
            tolerance = args.prop1_tolerance * report.analytic_value
            gap = abs(report.analytic_value - report.empirical_value)
            entry = report.as_dict()
            entry["tolerance"] = tolerance
            entry["passed"] = bool(gap <= max(3 * report.mc_standard_error, tolerance))
            propositions["prop1"] = entry
        if args.prop2:
            rng = np.random.default_rng(args.seed + 1)
            entries = []
            for rank in args.prop2_ranks:
                report = check_prop2(args.a2, rank, n_draws=args.draws, rng=rng)
                entry = report.as_dict()
                entry["rank"] = rank
                stable = truncation_deficit(args.a2, rank)
                direct = gamma_ratio_two_down_direct(args.a2) ** rank
                entry["closed_form_consistency"] = abs(stable - direct) <= 1e-12 * direct
                entries.append(entry)
            propositions["prop2"] = entries
        if propositions:
            lio.write_json(out / "propositions.json", propositions)
        if args.geweke:
            rng = np.random.default_rng(args.seed + 2)
            config = default_geweke_config(rank=2)
            dims = Dims(n_samples=20, n_covariates=3, n_targets=4, rank=2)
            report = geweke_test(config, dims, args.geweke_iters, rng)
            payload = report.as_dict()
            payload["passed"] = bool(report.fraction_within(4.0) >= 0.95)
            lio.write_json(out / "geweke.json", payload)

    _run_with_manifest(out, "verify", config_echo, {}, worker)


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "assoc": cmd_assoc,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

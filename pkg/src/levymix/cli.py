"""Command-line entry point ``levymix``.

Exit codes: 0 success, 1 usage or configuration error, 2 a verification
check failed, 3 numerical diagnostic (e.g. rejection cap, uncertifiable grid).
"""
from __future__ import annotations

import argparse
import hashlib
import math
import sys
import time
from pathlib import Path

import numpy as np

from levymix import __version__
from levymix.config import ConfigError, effective_config_text, load_config
from levymix.coupling import coupling_constants, run_chain_ensemble
from levymix.estimators import (
    ObservableSpec,
    VerificationReport,
    crosscheck_noise,
    estimate_mixing_rate,
    scan_theta,
    simulate_ensemble,
    validate_assumptions,
    verify_contraction,
    verify_pathwise_bounds,
    verify_stopping_times,
    verify_tail_bound,
)
from levymix.levy_noise import AssumptionDiagnosticError, gamma_K, tv_overlap

EXIT_OK, EXIT_USAGE, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2, 3

SCHEMA = {
    "report": [
        ("check", "name of the check"),
        ("status", "pass | fail | censored | skipped | info"),
        ("measured", "measured value"),
        ("target", "bound or reference value"),
        ("tolerance", "tolerance rule applied"),
        ("provenance", "origin of the target (closed-form, quadrature, MC oracle, ...)"),
        ("detail", "free-text diagnostics"),
    ],
    "simulate": [
        ("t", "time"),
        ("mean_norm_p", "ensemble mean of |X_t|^p"),
        ("se_norm_p", "standard error of mean_norm_p"),
        ("mean_capped_norm", "ensemble mean of min(|X_t|, 1)"),
        ("mean_tanh_mode1", "ensemble mean of tanh(x_1(t))"),
    ],
    "simulate_summary": [
        ("quantity", "summary quantity"),
        ("value", "measured value"),
        ("reference", "closed-form reference"),
    ],
    "chains": [
        ("replica", "replica index"),
        ("k", "chain index (0 = starting pair)"),
        ("tau", "coupling time tau_k"),
        ("dist", "|S^x(k) - S^y(k)| after the coupled jump"),
        ("norm_x", "|S^x(k)|"),
        ("norm_y", "|S^y(k)|"),
        ("pre_sep", "pre-jump H1 separation at tau_k"),
        ("coupled", "1 if the maximal coupling succeeded at tau_k"),
    ],
    "stopping": [
        ("replica", "replica index"),
        ("k_observed", "last observed chain index"),
        ("sigma_tilde", "first k>0 with |S^x|+|S^y| <= M (NA = censored)"),
        ("sigma", "first k>0 with |S^x-S^y| <= d (NA = censored)"),
        ("sigma_hat", "first k>=1 above the product-contraction line (NA = censored)"),
        ("sigma_dagger", "sigma + sigma_hat after sigma (NA = censored)"),
        ("sigma_bar", "sigma_dagger + sigma_tilde after sigma_dagger (NA = censored)"),
        ("n_sigma_bar", "number of finite iterated sigma_bar_k"),
    ],
    "stopping_moments": [
        ("which", "stopping index"),
        ("theta", "exponent"),
        ("hit_fraction", "fraction of replicas with the index observed"),
        ("mean_exp_hit", "mean exp(theta*index) over hit replicas (NA if none)"),
        ("censored_lower_bound", "mean exp(theta*min(index, k_observed))"),
    ],
    "mix": [
        ("t", "time"),
        ("gap", "|mean f(X^x_t) - mean f(X^y_t)|"),
        ("se", "standard error of the paired difference"),
        ("unmerged_fraction", "fraction of pairs with distinct H1 parts"),
        ("consistency_bound", "2 f_sup P(unmerged) + f_lip E[dist; merged]"),
    ],
    "mix_fit": [
        ("verdict", "fit | censored | identical-start"),
        ("fitted_C", "prefactor of C exp(-c t) (NA if no fit)"),
        ("fitted_c", "decay rate (NA if no fit)"),
        ("c_lo", "95% CI lower end"),
        ("c_hi", "95% CI upper end"),
        ("r_squared", "fit quality"),
        ("fit_points", "grid points in the fit range"),
    ],
    "tv": [
        ("separation", "|x1 - x2| with x1 = 0, x2 = s e_1"),
        ("value", "integral of |p_K(z-x1) - p_K(z-x2)|"),
        ("error_estimate", "absolute error bound"),
        ("method", "quadrature | spherical_reduction | monte_carlo"),
    ],
    "tv_constants": [
        ("quantity", "constant"),
        ("value", "value"),
    ],
}

FILE_SCHEMA = {
    "validate.csv": "report",
    "verify.csv": "report",
    "simulate.csv": "simulate",
    "simulate_summary.csv": "simulate_summary",
    "chains.csv": "chains",
    "stopping.csv": "stopping",
    "stopping_moments.csv": "stopping_moments",
    "mix.csv": "mix",
    "mix_fit.csv": "mix_fit",
    "tv.csv": "tv",
    "tv_constants.csv": "tv_constants",
}


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "NA" if math.isnan(v) else format(v, ".17g")
    s = str(v)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


class Output:
    def __init__(self, out_dir: Path, plots: bool):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.plots = plots

    def csv(self, name: str, rows):
        cols = [c for c, _ in SCHEMA[FILE_SCHEMA[name]]]
        lines = [",".join(cols)]
        for r in rows:
            if len(r) != len(cols):
                raise AssertionError(f"{name}: row width {len(r)} != {len(cols)}")
            lines.append(",".join(_cell(v) for v in r))
        self.write(name, "\n".join(lines) + "\n")

    def write(self, name: str, text: str):
        (self.dir / name).write_text(text, encoding="utf-8")
        self.files.append(name)

    def plot(self, name: str, csv_name: str, x: str, ys: list[str], logy: bool = False):
        if not self.plots:
            return
        cols = [c for c, _ in SCHEMA[FILE_SCHEMA[csv_name]]]
        parts = [f"'{csv_name}' using {cols.index(x) + 1}:{cols.index(y) + 1} with linespoints title '{y}'" for y in ys]
        text = "set datafile separator ','\nset key autotitle columnhead\n"
        text += f"set xlabel '{x}'\n" + ("set logscale y\n" if logy else "")
        text += f"set terminal pngcairo\nset output '{name}.png'\nplot " + ", \\\n     ".join(parts) + "\n"
        self.write(f"{name}.gp", text)


def report_rows(rep: VerificationReport):
    return [[c.name, c.status, c.measured, c.target, c.tolerance, c.provenance, c.detail] for c in rep.checks]


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_schema(out: Output):
    lines = []
    for f in sorted(x for x in out.files if x in FILE_SCHEMA):
        lines.append(f"{f}:")
        for col, desc in SCHEMA[FILE_SCHEMA[f]]:
            lines.append(f"  {col}: {desc}")
    out.write("schema.txt", "\n".join(lines) + "\n")


def write_manifest(out: Output, args, run, started: float):
    lines = [
        "levymix run manifest",
        f"version = {__version__}",
        f"subcommand = {args.command}",
        f"seed = {run.model.verification.seed}",
        f"threads = {args.threads}",
        f"started_utc = {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(started))}",
        f"elapsed_seconds = {time.time() - started:.3f}",
        "",
        "[config]",
        effective_config_text(run.settings),
        "[outputs]",
    ]
    lines += [f"{f} sha256={_digest(out.dir / f)}" for f in out.files]
    (out.dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- subcommands ----------------------------------------------------------------


def cmd_validate(run, args, out: Output) -> int:
    rep = validate_assumptions(run.model)
    out.csv("validate.csv", report_rows(rep))
    _print_report(rep)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_simulate(run, args, out: Output) -> int:
    m = run.model
    times, table, rate = simulate_ensemble(m, m.verification.replicas, m.verification.seed, threads=args.threads)
    out.csv("simulate.csv", [[t, *row[[0, 3, 1, 2]]] for t, row in zip(times, table)])
    out.csv("simulate_summary.csv", [["big_jump_rate", rate, gamma_K(m.levy)]])
    out.plot("simulate", "simulate.csv", "t", ["mean_norm_p", "mean_capped_norm"])
    print(f"big-jump rate {rate:.6g} (gamma_K = {gamma_K(m.levy):.6g})")
    return EXIT_OK


def cmd_couple(run, args, out: Output) -> int:
    m = run.model
    v = m.verification
    x, y = m.initial_states()
    ens = run_chain_ensemble(m, x, y, v.replicas, v.seed, v.k_max, threads=args.threads)
    rows = []
    for i in range(ens.replicas):
        for k in range(ens.k_observed[i] + 1):
            rows.append([i, k, ens.tau[i, k], ens.dist[i, k], ens.norm_x[i, k], ens.norm_y[i, k],
                         None if k == 0 else ens.pre_sep[i, k], None if k == 0 else bool(ens.coupled[i, k])])
    out.csv("chains.csv", rows)
    recs = ens.records(m)
    out.csv("stopping.csv", [[i, r.k_observed, r.sigma_tilde, r.sigma, r.sigma_hat, r.sigma_dagger, r.sigma_bar,
                              len(r.sigma_bar_seq)] for i, r in enumerate(recs)])
    mom = []
    for which in ("sigma_tilde", "sigma", "sigma_hat", "sigma_bar"):
        for e in scan_theta(recs, which):
            mom.append([which, e.theta, e.hit_fraction, e.mean_exp_hit, e.censored_lower_bound])
    out.csv("stopping_moments.csv", mom)
    print(f"{ens.replicas} chains, coupling success {ens.coupling_successes}/{ens.coupling_attempts}")
    return EXIT_OK


def cmd_mix(run, args, out: Output) -> int:
    m = run.model
    v = m.verification
    x, y = m.initial_states()
    obs = ObservableSpec.parse(v.observable)
    est = estimate_mixing_rate(m, x, y, obs, v.replicas, v.seed, threads=args.threads)
    out.csv("mix.csv", [list(r) for r in zip(est.times, est.gaps, est.std_errors, est.unmerged_fraction,
                                             est.consistency_bound)])
    ci = est.c_ci or (None, None)
    out.csv("mix_fit.csv", [[est.verdict, est.fitted_C, est.fitted_c, ci[0], ci[1], est.r_squared,
                             est.fit_range[1] if est.fit_range else 0]])
    out.plot("mix", "mix.csv", "t", ["gap", "se"], logy=True)
    if est.verdict == "fit":
        print(f"fitted c = {est.fitted_c:.6g} (95% CI {ci[0]:.4g}..{ci[1]:.4g}), r^2 = {est.r_squared:.4f}")
    else:
        print(f"mixing fit: {est.verdict}")
    return EXIT_OK


def cmd_tv(run, args, out: Output) -> int:
    m = run.model
    cfg = m.levy
    seps = np.linspace(0.0, 4.0 * cfg.K, 41)
    rows = []
    for s in seps:
        x2 = np.zeros(cfg.D)
        x2[0] = s
        r = tv_overlap(cfg, np.zeros(cfg.D), x2)
        rows.append([s, r.value, r.error_estimate, r.method])
    out.csv("tv.csv", rows)
    cc = coupling_constants(m)
    out.csv("tv_constants.csv", [["gamma_K", gamma_K(cfg)], ["beta0", cc.beta0], ["beta1", cc.beta1],
                                 ["beta2", cc.beta2], ["kappa", cc.kappa]])
    out.plot("tv", "tv.csv", "separation", ["value"])
    return EXIT_OK


def cmd_verify(run, args, out: Output) -> int:
    m = run.model
    v = m.verification
    s = run.settings["verification"]
    full = VerificationReport("verify")
    full.extend(validate_assumptions(m))
    full.extend(verify_pathwise_bounds(m, v.replicas, v.seed, threads=args.threads))
    full.extend(verify_contraction(m, v.gap0, max(v.replicas, 100), v.seed, threads=args.threads))
    if m.spectrum.lambda_Dp1 is not None:
        rep, _ = verify_stopping_times(m, v.replicas, v.seed, threads=args.threads)
        full.extend(rep)
    full.extend(verify_tail_bound(m, int(s["tail_l"]), float(s["tail_t"]), v.replicas, v.seed))
    full.extend(crosscheck_noise(m, float(s["noise_t"]), int(s["noise_replicas"]), v.seed))
    x, y = m.initial_states()
    est = estimate_mixing_rate(m, x, y, ObservableSpec.parse(v.observable), v.replicas, v.seed, threads=args.threads)
    full.add("mixing_consistency", "pass" if est.consistent else "fail", float(np.max(est.gaps - est.consistency_bound)),
             0.0, "exact on the ensemble", "coupled estimator identity")
    if est.verdict == "fit":
        ok = est.fitted_c > 0 and est.c_ci[0] > 0
        full.add("mixing_rate_positive", "pass" if ok else "fail", est.fitted_c, 0.0, "95% CI excludes 0",
                 "MC fit", f"r2 {est.r_squared:.4g}")
    else:
        full.add("mixing_rate_positive", "censored" if est.verdict == "censored" else "skipped", float("nan"), 0.0,
                 "95% CI excludes 0", "MC fit", est.verdict)
    out.csv("verify.csv", report_rows(full))
    _print_report(full)
    return EXIT_OK if full.passed else EXIT_FAIL


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "mix": cmd_mix,
    "verify": cmd_verify,
    "tv": cmd_tv,
}


def _print_report(rep: VerificationReport):
    for c in rep.checks:
        print(f"{c.status.upper():8s} {c.name}: measured {_cell(c.measured)} target {_cell(c.target)} "
              f"({c.tolerance}) {c.detail}".rstrip())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="levymix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"levymix {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="configuration file")
    p.add_argument("--seed", type=int, help="master seed (overrides verification.seed)")
    p.add_argument("--replicas", type=int, help="replica count (overrides verification.replicas)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--out", default="levymix_out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
    p.add_argument("--plots", action="store_true", help="also write gnuplot scripts")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"verification.seed={args.seed}")
    if args.replicas is not None:
        overrides.append(f"verification.replicas={args.replicas}")
    if args.threads < 1:
        print("levymix: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        run = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"levymix: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(effective_config_text(run.settings))
    out = Output(Path(args.out), args.plots)
    out.write("config.ini", effective_config_text(run.settings))
    try:
        code = COMMANDS[args.command](run, args, out)
    except AssumptionDiagnosticError as exc:
        print(f"levymix: numerical diagnostic: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"levymix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_schema(out)
    write_manifest(out, args, run, started)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``varpolaron <verb> CONFIG [--out DIR] [--jobs N]``.

Verbs: optimize, propagate, scan, ablate, rates, convergence.  Each run
writes versioned CSV files and ``manifest.json`` into the output directory
(``--out``, else the config's ``output_dir``, else ``$VARPOLARON_OUTPUT_DIR``,
else ``./varpolaron_out``).

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 internal error.  Failures print a JSON error object on stderr and write it
to ``error.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from .config import ConfigError, RunConfig, build_problem, config_hash, emit_config, load_config, to_dict
from .correlation import sample_propagators
from .dynamics import (
    PropagationError,
    bloch_redfield_propagate,
    eigenstate,
    polaron_limit_propagate,
    site_state,
    variational_dynamics,
)
from .expsum import FitError, correlation_expansion, fit_exponentials, rate_gamma
from .observables import mode_ablation, scan
from .spectral import ModeComb, QuadratureError, SumDensity
from .units import cm, kelvin_to_beta, to_cm
from .variational import convergence_scan, solve_self_consistent

__all__ = ["main", "run", "write_csv", "read_csv", "CSV_SCHEMAS", "OUTPUT_ENV", "VERBS"]

log = logging.getLogger("varpolaron")

OUTPUT_ENV = "VARPOLARON_OUTPUT_DIR"
MANIFEST_VERSION = 1
CSV_VERSION = 1
VERBS = ("optimize", "propagate", "scan", "ablate", "rates", "convergence")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4

#: column names per CSV kind; populations/coherence columns are per site
CSV_SCHEMAS = {
    "solution": ["site", "label", "alpha_cm", "B", "R_cm", "clamped", "diverged"],
    "optimizer_history": ["iteration", "residual"],
    "populations": ["t_ps"],  # + P_<label> per site
    "scan": ["value", "L_var", "L_polaron", "alpha_mean_cm", "alpha_std_cm", "converged"],
    "ablation": ["k", "tau_ps"],
    "exponentials": ["term", "re_a", "im_a", "re_gamma_per_ps", "im_gamma_per_ps"],
    "propagator": ["t_ps", "re_phi", "im_phi", "re_phi_fit", "im_phi_fit"],
    "correlation": ["t_ps", "re_C_fit", "im_C_fit", "re_C_direct", "im_C_direct"],
    "rates": ["omega_cm", "re_Gamma_per_ps", "im_Gamma_per_ps"],
    "convergence": ["p", "eps_p"],
}


class NumericalFailure(RuntimeError):
    """A solver finished without meeting its convergence criterion."""


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if x is None:
        return ""
    s = str(x)
    if any(c in s for c in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_csv(path: Path, kind: str, columns: list[str], rows) -> str:
    """Write ``# varpolaron-csv v1 <kind>`` + header + rows; returns the file's sha256."""
    lines = [f"# varpolaron-csv v{CSV_VERSION} {kind}", ",".join(columns)]
    for r in rows:
        r = list(r)
        if len(r) != len(columns):
            raise ValueError(f"{kind}: row has {len(r)} fields, header has {len(columns)}")
        lines.append(",".join(_fmt(x) for x in r))
    data = ("\n".join(lines) + "\n").encode()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """Return ``(kind, header, rows)`` of a file written by :func:`write_csv`."""
    import csv

    with open(path, newline="") as fh:
        first = fh.readline().strip().split()
        if len(first) != 4 or first[0] != "#" or first[1] != "varpolaron-csv" or not first[2].startswith("v"):
            raise ValueError(f"{path}: not a versioned varpolaron CSV")
        reader = csv.reader(fh)
        header = next(reader)
        return first[3], header, [row for row in reader]


@dataclass
class RunOutcome:
    files: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    skipped: str | None = None


def _site(net, key):
    if isinstance(key, str) and key.lstrip("-").isdigit() and (net.labels is None or key not in net.labels):
        key = int(key)
    return net.site_index(key)


def _sites(problem, key) -> list[int]:
    if key is None:
        raise ConfigError("ablation.target", "required for ablate")
    if isinstance(key, str) and key in problem.groups:
        return list(problem.groups[key])
    if isinstance(key, (list, tuple)):
        return [_site(problem.network, k) for k in key]
    return [_site(problem.network, key)]


def _initial_state(cfg: RunConfig, problem, beta, H=None):
    net = problem.network
    d = cfg.dynamics
    key = d.initial_site
    if isinstance(key, str) and key in problem.groups:
        sites = problem.groups[key]
        rho = np.zeros((net.n_sites, net.n_sites), complex)
        rho[sites, sites] = 1.0 / len(sites)
        return rho
    H = net.hamiltonian() if H is None else H
    if d.initial == "matrix":
        rho = np.load(d.initial_file)
        if rho.shape != (net.n_sites, net.n_sites):
            raise ConfigError("dynamics.initial_file", f"expected a {net.n_sites}x{net.n_sites} matrix, got {rho.shape}")
        return rho.astype(complex)
    if d.initial == "eigenstate_index":
        if not 0 <= d.eigenstate_index < net.n_sites:
            raise ConfigError("dynamics.eigenstate_index", f"outside [0, {net.n_sites - 1}]")
        return eigenstate(H, index=d.eigenstate_index)
    try:
        n = _site(net, key)
    except (KeyError, IndexError) as exc:
        raise ConfigError("dynamics.initial_site", str(exc)) from None
    if d.initial == "site":
        return site_state(net.n_sites, n)
    return eigenstate(H, site=n)


def _time_grid(d) -> np.ndarray:
    n = int(round(d.t_max_ps / d.stride_ps))
    return np.linspace(0.0, n * d.stride_ps, n + 1)


def _optimize(cfg, problem, beta):
    o = cfg.optimizer
    return solve_self_consistent(problem.network, problem.baths, beta, p=o.p, tol=o.tol,
                                 max_iter=o.max_iter, damping=o.damping)


def _labels(net):
    return net.labels or tuple(str(k) for k in range(net.n_sites))


def verb_optimize(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    beta = kelvin_to_beta(problem.temperature)
    sol = _optimize(cfg, problem, beta)
    net = problem.network
    res = RunOutcome()
    labels = _labels(net)
    rows = [(n, labels[n], to_cm(sol.alpha[n]), sol.B[n], to_cm(sol.R[n]), bool(np.asarray(sol.clamped)[n]),
             bool(np.asarray(sol.diverged)[n])) for n in range(net.n_sites)]
    res.files["solution.csv"] = write_csv(out / "solution.csv", "solution", CSV_SCHEMAS["solution"], rows)
    res.files["optimizer_history.csv"] = write_csv(out / "optimizer_history.csv", "optimizer_history",
                                                   CSV_SCHEMAS["optimizer_history"], sol.history)
    res.flags["optimizer_converged"] = bool(sol.converged)
    res.results.update(iterations=int(sol.iterations), residual=float(sol.residual), p=int(sol.p))
    return res


def verb_propagate(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    d = cfg.dynamics
    beta = kelvin_to_beta(problem.temperature)
    net, baths = problem.network, problem.baths
    t = _time_grid(d)
    res = RunOutcome()
    if d.solver == "redfield":
        rho0 = _initial_state(cfg, problem, beta)
        traj = bloch_redfield_propagate(net, baths, beta, rho0, t)
    else:
        kw = dict(markov=d.markov, lamb_shift=d.lamb_shift, rtol=d.rtol, atol=d.atol)
        if d.solver == "polaron":
            rho0 = _initial_state(cfg, problem, beta)
            traj = polaron_limit_propagate(net, baths, beta, rho0, t, **kw)
        else:
            sol = _optimize(cfg, problem, beta)
            res.flags["optimizer_converged"] = bool(sol.converged)
            rho0 = _initial_state(cfg, problem, beta, H=sol.hamiltonian(net).matrix())
            traj = variational_dynamics(net, baths, beta, rho0, t, solution=sol, **kw)
    cols = CSV_SCHEMAS["populations"] + [f"P_{lab}" for lab in _labels(net)]
    P = traj.populations
    res.files["populations.csv"] = write_csv(out / "populations.csv", "populations", cols,
                                             ([t[k], *P[k]] for k in range(t.size)))
    if d.dump_states:
        # row-major (time, row, col), each entry as (re, im) little-endian float64
        data = np.ascontiguousarray(traj.states, dtype="<c16").tobytes()
        (out / "states.bin").write_bytes(data)
        res.files["states.bin"] = hashlib.sha256(data).hexdigest()
        res.results["states_shape"] = list(traj.states.shape)
    res.flags["trace_preserved"] = bool(traj.trace_drift < 1e-8)
    res.results.update(frame=traj.frame, trace_drift=traj.trace_drift, min_population=traj.min_population)
    return res


def verb_scan(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    s = cfg.scan
    o = cfg.optimizer
    opt = dict(tol=o.tol, max_iter=o.max_iter, damping=o.damping)
    if s.A_cm is not None:
        values = np.array(s.A_cm, dtype=float)
        r = scan("A", cm(values), problem.network, problem.baths, p=o.p, temperature=problem.temperature,
                 jobs=jobs, **opt)
        unit, conv = "cm^-1", to_cm
    elif s.T_K is not None:
        values = np.array(s.T_K, dtype=float)
        r = scan("T", values, problem.network, problem.baths, p=o.p, jobs=jobs, **opt)
        unit, conv = "K", (lambda x: x)
    else:
        raise ConfigError("scan", "give A_cm or T_K")
    rows = [(values[k], r.L[k], r.L_polaron[k], to_cm(r.alpha_mean[k]), to_cm(r.alpha_std[k]), r.converged[k])
            for k in range(values.size)]
    res = RunOutcome()
    res.files["scan.csv"] = write_csv(out / "scan.csv", "scan", CSV_SCHEMAS["scan"], rows)
    res.flags["all_points_converged"] = bool(np.all(r.converged))
    res.results.update(
        parameter=r.parameter, unit=unit,
        transition=None if r.transition is None else float(conv(r.transition)),
        transition_polaron=None if r.transition_polaron is None else float(conv(r.transition_polaron)),
        unconverged_points=[float(v) for v in values[~r.converged]],
    )
    return res


def _has_modes(sd) -> bool:
    parts = sd.components if isinstance(sd, SumDensity) else (sd,)
    return any(isinstance(c, ModeComb) and c.modes for c in parts)


def verb_ablate(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    res = RunOutcome()
    if not all(_has_modes(sd) for sd in problem.baths):
        res.skipped = "no mode-comb bath on every site (supply network.mode_file or a mode_comb bath)"
        return res
    a = cfg.ablation
    d = cfg.dynamics
    beta = kelvin_to_beta(problem.temperature)
    target = _sites(problem, a.target)
    rho0 = _initial_state(cfg, problem, beta)
    taus = mode_ablation(problem.network, problem.baths, beta, rho0, _time_grid(d), target,
                         threshold=a.threshold, cluster_size=a.cluster_size, p=cfg.optimizer.p,
                         markov=d.markov, lamb_shift=d.lamb_shift, rtol=d.rtol, atol=d.atol)
    res.files["ablation.csv"] = write_csv(out / "ablation.csv", "ablation", CSV_SCHEMAS["ablation"], taus)
    res.flags["all_reached_threshold"] = all(tau is not None for _, tau in taus)
    return res


def verb_rates(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    r = cfg.rates
    beta = kelvin_to_beta(problem.temperature)
    net = problem.network
    try:
        n = _site(net, r.site)
    except (KeyError, IndexError) as exc:
        raise ConfigError("rates.site", str(exc)) from None
    res = RunOutcome()
    if r.alpha_cm is None:
        sol = _optimize(cfg, problem, beta)
        res.flags["optimizer_converged"] = bool(sol.converged)
        alpha = float(sol.alpha[n])
    else:
        alpha = cm(r.alpha_cm)
    if not np.isfinite(alpha):
        raise NumericalFailure(f"site {n} is in the weak-coupling frame (alpha = inf); nothing to fit")
    sd = problem.baths[n]
    t = np.linspace(0.0, r.t_fit_ps, r.n_samples)
    phi = sample_propagators([sd], np.array([alpha]), beta, t).xy[0]
    fit = fit_exponentials(t, phi, r.fit_terms)
    ex = correlation_expansion(fit, 1, order=r.expansion_order)
    C_direct = np.exp(phi) - 1
    C_fit = ex(t)
    w = np.linspace(r.omega_min_cm, r.omega_max_cm, r.n_omega)
    G = rate_gamma(ex, cm(w))
    res.files["exponentials.csv"] = write_csv(
        out / "exponentials.csv", "exponentials", CSV_SCHEMAS["exponentials"],
        ((j, fit.a[j].real, fit.a[j].imag, fit.gamma[j].real, fit.gamma[j].imag) for j in range(fit.n_terms)))
    phi_fit = fit(t)
    res.files["propagator.csv"] = write_csv(
        out / "propagator.csv", "propagator", CSV_SCHEMAS["propagator"],
        ((t[k], phi[k].real, phi[k].imag, phi_fit[k].real, phi_fit[k].imag) for k in range(t.size)))
    (out / "exponentials.json").write_text(fit.dumps() + "\n")
    res.files["correlation.csv"] = write_csv(
        out / "correlation.csv", "correlation", CSV_SCHEMAS["correlation"],
        ((t[k], C_fit[k].real, C_fit[k].imag, C_direct[k].real, C_direct[k].imag) for k in range(t.size)))
    res.files["rates.csv"] = write_csv(out / "rates.csv", "rates", CSV_SCHEMAS["rates"],
                                       ((w[k], G[k].real, G[k].imag) for k in range(w.size)))
    scale = float(np.abs(C_direct).max()) or 1.0
    res.results.update(site=n, alpha_cm=float(to_cm(alpha)), fit_terms=fit.n_terms, expansion_order=ex.order,
                       expansion_terms=ex.n_terms, fit_max_residual=float(fit.max_residual),
                       correlation_rel_error=float(np.abs(C_fit - C_direct).max() / scale))
    return res


def verb_convergence(cfg, problem, out: Path, jobs: int) -> RunOutcome:
    c = cfg.convergence
    net = problem.network
    p_max = min(c.p_max, net.n_sites)
    if c.p_min > p_max:
        raise ConfigError("convergence.p_min", f"exceeds the network size {net.n_sites}")
    beta = kelvin_to_beta(problem.temperature)
    eps = convergence_scan(net, problem.baths, beta, range(max(2, c.p_min), p_max + 1), tol=c.tol)
    res = RunOutcome()
    res.files["convergence.csv"] = write_csv(out / "convergence.csv", "convergence", CSV_SCHEMAS["convergence"], eps)
    res.results["min_eps"] = float(min(e for _, e in eps)) if eps else None
    return res


_VERBS = {
    "optimize": verb_optimize,
    "propagate": verb_propagate,
    "scan": verb_scan,
    "ablate": verb_ablate,
    "rates": verb_rates,
    "convergence": verb_convergence,
}


def _versions() -> dict:
    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"varpolaron": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def output_directory(cfg: RunConfig | None, flag: str | None) -> Path:
    if flag:
        return Path(flag)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "varpolaron_out"))


def run(verb: str, cfg: RunConfig, out: Path, jobs: int = 1) -> tuple[int, dict]:
    """Execute ``verb``; always writes ``manifest.json``.  Returns ``(exit code, manifest)``."""
    if verb not in _VERBS:
        raise ConfigError("<verb>", f"unknown verb {verb!r}; choose from {list(VERBS)}")
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    problem = build_problem(cfg)
    outcome = _VERBS[verb](cfg, problem, out, jobs)
    code = EXIT_OK if all(outcome.flags.values()) else EXIT_NUMERIC
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "verb": verb,
        "status": "skipped" if outcome.skipped else ("ok" if code == EXIT_OK else "not_converged"),
        "skipped": outcome.skipped,
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "versions": _versions(),
        "started": started,
        "wall_time_s": time.perf_counter() - t0,
        "convergence": outcome.flags,
        "results": outcome.results,
        "outputs": outcome.files,
        "csv_schemas": {k: CSV_SCHEMAS[k] for k in CSV_SCHEMAS},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return code, manifest


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


def _error(code: int, exc: BaseException, out: Path | None) -> int:
    body = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        body["key"] = exc.key
    if code == EXIT_INTERNAL:
        body["traceback"] = traceback.format_exception_only(type(exc), exc)[-1].strip()
    text = json.dumps(body, sort_keys=True)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(text + "\n")
        except OSError:
            pass
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="varpolaron", description="Variational polaron transport toolkit")
    ap.add_argument("verb", choices=VERBS + ("show-config",))
    ap.add_argument("config", help="YAML config or a manifest.json from an earlier run")
    ap.add_argument("--out", help=f"output directory (default: config output_dir, ${OUTPUT_ENV}, ./varpolaron_out)")
    ap.add_argument("--jobs", type=int, default=1, help="parallel workers for scans")
    ap.add_argument("--log-level", default="WARNING")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be >= 1")
        cfg = load_config(args.config)
        if args.verb == "show-config":
            sys.stdout.write(emit_config(cfg))
            return EXIT_OK
        out = output_directory(cfg, args.out)
        code, manifest = run(args.verb, cfg, out, args.jobs)
        if manifest["skipped"]:
            print(f"skipped: {manifest['skipped']}", file=sys.stderr)
        return code
    except ConfigError as exc:
        return _error(EXIT_CONFIG, exc, out)
    except (NumericalFailure, PropagationError, FitError, QuadratureError) as exc:
        return _error(EXIT_NUMERIC, exc, out)
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        return _error(EXIT_INTERNAL, exc, out)


if __name__ == "__main__":
    sys.exit(main())

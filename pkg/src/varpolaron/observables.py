"""Localization and transport diagnostics built on top of the solvers."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .dynamics import Trajectory, variational_dynamics
from .network import Network
from .spectral import ModeComb, SpectralDensity, SumDensity, combine
from .units import kelvin_to_beta
from .variational import (
    RenormalizedHamiltonian,
    fixed_solution,
    solve_self_consistent,
)

__all__ = [
    "thermal_state",
    "to_untransformed_frame",
    "coherence_length",
    "localized_coherence_length",
    "LocalizationMap",
    "localization_map",
    "transfer_time",
    "ScanResult",
    "detect_transition",
    "scan",
    "mode_ablation",
]

log = logging.getLogger(__name__)


def _matrix(H) -> np.ndarray:
    return H.matrix() if isinstance(H, RenormalizedHamiltonian) else np.asarray(H)


def thermal_state(H: RenormalizedHamiltonian | np.ndarray, beta: float) -> np.ndarray:
    """``exp(-beta H) / Z`` from a shifted eigendecomposition.

    ``beta = 0`` gives ``I/N``; ``beta = inf`` the (equal-weight) ground-space projector.
    """
    Hm = _matrix(H)
    e, U = linalg.eigh(Hm)
    if np.isinf(beta):
        w = (e - e[0] <= 1e-12 * max(1.0, abs(e[0]))).astype(float)
    else:
        w = np.exp(-beta * (e - e[0]))
    w /= w.sum()
    rho = (U * w) @ U.conj().T
    return 0.5 * (rho + rho.conj().T)


def to_untransformed_frame(rho: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``rho_ij B_i B_j`` off the diagonal; diagonal unchanged."""
    rho = np.asarray(rho)
    B = np.asarray(B, dtype=float)
    if B.shape != (rho.shape[0],):
        raise ValueError("one renormalization factor per site required")
    if np.any(B < 0) or np.any(B > 1):
        raise ValueError("renormalization factors must lie in [0, 1]")
    out = rho * np.outer(B, B)
    np.fill_diagonal(out, np.diag(rho))
    return out


def coherence_length(rho: np.ndarray) -> float:
    """``(sum_ij |rho_ij|)^2 / (N sum_ij |rho_ij|^2)``, between ``1/N`` and ``N``."""
    rho = np.asarray(rho)
    a = np.abs(rho)
    den = float((a**2).sum())
    if den == 0:
        raise ValueError("coherence length of a zero matrix")
    return float(a.sum() ** 2 / (rho.shape[0] * den))


def localized_coherence_length(n_triplets: int, beta: float, delta: float) -> float:
    """Closed form for a diagonal state with weights ``exp(-beta i delta)`` per triplet ``i``.

    ``(1/M) (1 - r^M)(1 + r) / ((1 + r^M)(1 - r))`` with ``r = exp(-beta delta)``.
    """
    M = n_triplets
    r = np.exp(-beta * delta)
    if r == 1.0:
        return 1.0
    return float((1 - r**M) * (1 + r) / (M * (1 + r**M) * (1 - r)))


@dataclass(frozen=True)
class LocalizationMap:
    """Eigenpairs sorted by energy with per-site weights."""

    energies: np.ndarray
    gaps: np.ndarray
    weights: np.ndarray
    participation: np.ndarray

    def center_of_mass(self) -> np.ndarray:
        return self.weights @ np.arange(self.weights.shape[1])


def localization_map(H: RenormalizedHamiltonian | np.ndarray) -> LocalizationMap:
    """Weights ``|<n|psi_k>|^2`` (row ``k``), gaps to the ground state and participation ratios."""
    e, U = linalg.eigh(_matrix(H))
    w = (np.abs(U) ** 2).T
    w /= w.sum(axis=1, keepdims=True)
    return LocalizationMap(e, e - e[0], w, 1.0 / (w**2).sum(axis=1))


def transfer_time(traj: Trajectory, target: Sequence[int], threshold: float) -> float | None:
    """First time the summed target population reaches ``threshold`` (linear interpolation)."""
    target = list(target)
    if not target:
        raise ValueError("empty target set")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    P = traj.populations[:, target].sum(axis=1)
    hit = np.nonzero(P >= threshold)[0]
    if hit.size == 0:
        return None
    k = int(hit[0])
    if k == 0:
        return float(traj.times[0])
    t0, t1 = traj.times[k - 1], traj.times[k]
    p0, p1 = P[k - 1], P[k]
    return float(t0 + (threshold - p0) * (t1 - t0) / (p1 - p0))


# ---------------------------------------------------------------------- scans


@dataclass
class ScanResult:
    """Coherence lengths and variational statistics along a parameter axis."""

    parameter: str
    values: np.ndarray
    L: np.ndarray
    L_polaron: np.ndarray
    alpha_mean: np.ndarray
    alpha_std: np.ndarray
    converged: np.ndarray
    transition: float | None = None
    transition_polaron: float | None = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        for k in range(self.values.size):
            yield (self.values[k], self.L[k], self.L_polaron[k], self.alpha_mean[k], self.alpha_std[k], bool(self.converged[k]))


def detect_transition(values: np.ndarray, L: np.ndarray, factor: float = 3.0) -> float | None:
    """Midpoint of the steepest drop in ``L`` if it exceeds ``factor`` times the median step change.

    The steepest step must be interior to the axis: a curve that falls
    fastest at either end of the scan (smooth convex decay) has no critical
    point inside the scanned window.
    """
    values = np.asarray(values, dtype=float)
    L = np.asarray(L, dtype=float)
    if values.size < 3:
        return None
    d = np.diff(L)
    k = int(np.argmin(d))
    drop = -d[k]
    med = float(np.median(np.abs(d)))
    if drop <= 0 or drop <= factor * med or k in (0, d.size - 1):
        return None
    return float(0.5 * (values[k] + values[k + 1]))


def _with_amplitude(sd: SpectralDensity, A: float) -> SpectralDensity:
    if dataclasses.is_dataclass(sd) and "A" in {f.name for f in dataclasses.fields(sd)}:
        return dataclasses.replace(sd, A=A)
    raise TypeError(f"coupling scans need a density with an amplitude A; got {type(sd).__name__}")


def _scan_point(net, baths, beta, p, init, opt_kw):
    sol = solve_self_consistent(net, baths, beta, p=p, init=init, **opt_kw)
    rho = to_untransformed_frame(thermal_state(sol.hamiltonian(net), beta), sol.B)
    pol = fixed_solution(net, baths, beta, "polaron")
    rho_p = to_untransformed_frame(thermal_state(pol.hamiltonian(net), beta), pol.B)
    a = sol.alpha[np.isfinite(sol.alpha)]
    return (coherence_length(rho), coherence_length(rho_p),
            float(a.mean()) if a.size else np.inf, float(a.std()) if a.size else 0.0,
            bool(sol.converged), sol.alpha)


def _scan_job(args):
    return _scan_point(*args)[:5]


def scan(
    parameter: str,
    values,
    net: Network,
    baths: Sequence[SpectralDensity],
    p: int | None = None,
    temperature: float | None = None,
    amplitude_map: Callable[[SpectralDensity, float], SpectralDensity] | None = None,
    jobs: int = 1,
    **opt_kw,
) -> ScanResult:
    """Coherence length of the thermal state along a coupling-amplitude or temperature axis.

    ``parameter`` is ``'A'`` (values are bath amplitudes, rad/ps, at fixed
    ``temperature`` in K) or ``'T'`` (values in K).  Each point re-runs the
    optimizer, warm-started from the previous point when sequential; the
    thermal state of the renormalized Hamiltonian is mapped back to the
    untransformed frame.  The polaron variant uses ``F = 1`` throughout.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("scan needs a non-empty 1-D axis")
    if np.any(np.diff(values) <= 0):
        raise ValueError("scan values must increase strictly")
    if parameter not in ("A", "T"):
        raise ValueError("parameter must be 'A' or 'T'")
    if parameter == "A" and temperature is None:
        raise ValueError("a coupling scan needs a temperature")
    amp = amplitude_map or _with_amplitude
    points = []
    for v in values:
        if parameter == "A":
            points.append(([amp(sd, v) for sd in baths], kelvin_to_beta(temperature)))
        else:
            points.append((list(baths), kelvin_to_beta(v)))
    n = values.size
    L = np.empty(n)
    Lp = np.empty(n)
    am = np.empty(n)
    sd_ = np.empty(n)
    conv = np.zeros(n, dtype=bool)
    if jobs > 1:
        args = [(net, b, beta, p, "reorg", opt_kw) for b, beta in points]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            res = list(ex.map(_scan_job, args))
        for k, r in enumerate(res):
            L[k], Lp[k], am[k], sd_[k], conv[k] = r
    else:
        init = "reorg"
        for k, (b, beta) in enumerate(points):
            L[k], Lp[k], am[k], sd_[k], conv[k], alpha = _scan_point(net, b, beta, p, init, opt_kw)
            if conv[k] and np.all(np.isfinite(alpha)):
                init = alpha
            else:
                log.warning("optimizer did not converge at %s = %g", parameter, values[k])
                init = "reorg"
    return ScanResult(parameter, values, L, Lp, am, sd_, conv, detect_transition(values, L),
                      detect_transition(values, Lp), {"p": p, "temperature": temperature})


def _split_modes(sd: SpectralDensity):
    parts = sd.components if isinstance(sd, SumDensity) else (sd,)
    modes = [c for c in parts if isinstance(c, ModeComb)]
    if not modes:
        raise ValueError("mode ablation needs a mode-comb component in the bath")
    rest = [c for c in parts if not isinstance(c, ModeComb)]
    return rest, modes


def mode_ablation(
    net: Network,
    baths: Sequence[SpectralDensity],
    beta: float,
    rho0: np.ndarray,
    t_grid,
    target: Sequence[int],
    threshold: float = 0.8,
    cluster_size: int = 5,
    p: int | None = None,
    **dyn_kw,
) -> list[tuple[int, float | None]]:
    """Transfer time with the first ``k`` mode clusters added to the background, ``k = 0..n_clusters``.

    Clusters are consecutive groups of ``cluster_size`` modes in frequency
    order; the same clustering is applied to every site's bath.
    """
    split = [_split_modes(sd) for sd in baths]
    clusters = []
    for rest, modes in split:
        mc = modes[0] if len(modes) == 1 else ModeComb(
            tuple(m for c in modes for m in c.modes), modes[0].gamma)
        clusters.append((rest, mc.clusters(cluster_size)))
    n_cl = max(len(c) for _, c in clusters)
    out = []
    for k in range(n_cl + 1):
        site_baths = []
        for rest, cl in clusters:
            parts = list(rest) + list(cl[:k])
            site_baths.append(combine(parts) if len(parts) != 1 else parts[0])
        traj = variational_dynamics(net, site_baths, beta, rho0, t_grid, p=p, **dyn_kw)
        out.append((k, transfer_time(traj, target, threshold)))
        log.info("ablation k=%d: tau=%s", k, out[-1][1])
    return out

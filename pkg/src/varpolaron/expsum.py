"""Exponential-sum representations of bath propagators and their rates.

``phi(t) = sum_j (a_j + b_j t) exp(-gamma_j t)`` with ``Re gamma_j > 0``.
Such sums have closed-form Fourier-Laplace integrals, and ``exp(+-phi) - 1``
expands into a finite sum of exponentials over integer partitions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy import optimize

__all__ = [
    "ExponentialSum",
    "PartitionExpansion",
    "fit_exponentials",
    "correlation_expansion",
    "rate_gamma",
    "choose_order",
    "FitError",
]

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Exponential fit could not reach an acceptable residual."""


def _phi1(x):
    """``(1 - exp(-x)) / x`` with the removable singularity at 0."""
    x = np.asarray(x, dtype=complex)
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    out = -np.expm1(-xs) / xs
    ser = 1.0 - x / 2.0 + x**2 / 6.0 - x**3 / 24.0
    return np.where(small, ser, out)


def _phi2(x):
    """``(1 - exp(-x)(1 + x)) / x**2`` with its limit 1/2 at 0."""
    x = np.asarray(x, dtype=complex)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    out = (-np.expm1(-xs) - xs * np.exp(-xs)) / xs**2
    ser = 0.5 - x / 3.0 + x**2 / 8.0 - x**3 / 30.0 + x**4 / 144.0
    return np.where(small, ser, out)


@dataclass(frozen=True, eq=False)
class ExponentialSum:
    """Terms ``(a_j + b_j t) exp(-gamma_j t)``; ``Re gamma_j > 0`` is enforced."""

    a: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    max_residual: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=complex))
        b = np.atleast_1d(np.asarray(self.b, dtype=complex)) if np.size(self.b) else np.zeros_like(a)
        g = np.atleast_1d(np.asarray(self.gamma, dtype=complex))
        if a.size == 0:
            a = b = g = np.zeros(0, dtype=complex)
        if not (a.shape == b.shape == g.shape):
            raise ValueError("a, b and gamma must have equal length")
        if np.any(g.real <= 0):
            raise ValueError("every exponent needs Re(gamma) > 0")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def empty(cls) -> "ExponentialSum":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @property
    def n_terms(self) -> int:
        return self.a.size

    def __len__(self):
        return self.n_terms

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.n_terms == 0:
            return np.zeros(t.shape, dtype=complex)
        tt = t[..., None]
        return np.sum((self.a + self.b * tt) * np.exp(-self.gamma * tt), axis=-1)

    def __add__(self, other: "ExponentialSum") -> "ExponentialSum":
        return ExponentialSum(
            np.concatenate([self.a, other.a]),
            np.concatenate([self.b, other.b]),
            np.concatenate([self.gamma, other.gamma]),
            self.max_residual + other.max_residual,
        )

    def scaled(self, c: complex) -> "ExponentialSum":
        return ExponentialSum(c * self.a, c * self.b, self.gamma, abs(c) * self.max_residual)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.scaled(other)
        if np.any(self.b != 0) and np.any(other.b != 0):
            raise ValueError("product of two sums with linear-in-t parts is not an exponential sum")
        A1, A2 = self.a[:, None], other.a[None, :]
        B1, B2 = self.b[:, None], other.b[None, :]
        g = self.gamma[:, None] + other.gamma[None, :]
        return ExponentialSum((A1 * A2).ravel(), (A1 * B2 + B1 * A2).ravel(), g.ravel())

    def rate(self, omega, t=np.inf):
        """``int_0^t exp(i w s) phi(s) ds`` in closed form (``t = inf`` allowed)."""
        omega = np.asarray(omega, dtype=float)
        if self.n_terms == 0:
            return np.zeros(np.broadcast(omega, np.asarray(t)).shape, dtype=complex)
        z = self.gamma - 1j * omega[..., None]
        if np.isinf(t):
            return np.sum(self.a / z + self.b / z**2, axis=-1)
        t = np.asarray(t, dtype=float)[..., None]
        x = z * t
        return np.sum(self.a * t * _phi1(x) + self.b * t**2 * _phi2(x), axis=-1)

    def to_dict(self) -> dict:
        return {
            "a": [[float(v.real), float(v.imag)] for v in self.a],
            "b": [[float(v.real), float(v.imag)] for v in self.b],
            "gamma": [[float(v.real), float(v.imag)] for v in self.gamma],
            "max_residual": float(self.max_residual),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExponentialSum":
        c = lambda rows: np.array([complex(r, i) for r, i in rows], dtype=complex)
        return cls(c(d["a"]), c(d["b"]), c(d["gamma"]), float(d.get("max_residual", 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _pencil_exponents(y, n_terms, dt):
    """Matrix-pencil estimate of ``n_terms`` exponents from uniform samples."""
    m = y.size
    L = max(n_terms, min(m // 2, m - n_terms - 1))
    Y = np.lib.stride_tricks.sliding_window_view(y, L + 1)
    _, _, Vh = np.linalg.svd(Y, full_matrices=False)
    V = Vh[:n_terms].conj().T
    V1, V2 = V[:-1], V[1:]
    z = np.linalg.eigvals(np.linalg.pinv(V1) @ V2)
    z = np.where(np.abs(z) < 1e-300, 1e-300, z)
    return -np.log(z.astype(complex)) / dt


def _amplitudes(t, y, gamma, mu=0.0):
    A = np.exp(-np.outer(t, gamma))
    if mu > 0:
        A = np.vstack([A, np.sqrt(mu) * np.eye(gamma.size)])
        y = np.concatenate([y, np.zeros(gamma.size)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return coef


def _refine(tau, y, g, min_rate, mu):
    """Variable projection: exponents by nonlinear least squares with the
    (ridge-regularised) amplitudes eliminated at every evaluation."""
    n = g.size
    sq = np.sqrt(mu)

    def resid(x):
        gg = x[:n] + 1j * x[n:]
        c = _amplitudes(tau, y, gg, mu)
        r = np.exp(-np.outer(tau, gg)) @ c - y
        if mu > 0:
            r = np.concatenate([r, sq * c])
        return np.concatenate([r.real, r.imag])

    x0 = np.concatenate([g.real.clip(min_rate), g.imag])
    lo = np.concatenate([np.full(n, min_rate), np.full(n, -np.inf)])
    try:
        sol = optimize.least_squares(resid, x0, bounds=(lo, np.inf), x_scale="jac",
                                     xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=400)
    except (ValueError, np.linalg.LinAlgError) as exc:  # pragma: no cover - numerical corner
        log.warning("exponential-fit refinement failed: %s", exc)
        return g
    return sol.x[:n] + 1j * sol.x[n:]


def fit_exponentials(
    t,
    y,
    n_terms: int,
    refine: bool = True,
    min_rate: float | None = None,
    max_terms: int | None = None,
    target: float | None = None,
    max_condition: float = 50.0,
) -> ExponentialSum:
    """Least-squares exponential-sum fit of samples on a uniform grid.

    Exponents start from a matrix-pencil estimate and are refined by
    variable projection.  Exponents with ``Re gamma <= 0`` are reflected into
    the right half plane.  The amplitude condition ``sum|a_j| / max|y|`` is
    kept below ``max_condition`` by a ridge penalty that grows until it is
    met, since cancelling large amplitudes wreck the partition expansion.

    If ``target`` is given and the max residual exceeds it, the term count
    is raised up to ``max_terms`` before giving up with :class:`FitError`.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=complex)
    if t.ndim != 1 or t.shape != y.shape or t.size < 3:
        raise ValueError("need matching 1-D sample arrays with at least 3 points")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("fit_exponentials needs a uniform time grid")
    if n_terms < 1:
        raise ValueError("n_terms must be >= 1")
    scale = np.abs(y).max()
    if scale == 0:
        return ExponentialSum.empty()
    dt = dt[0]
    t0 = t[0]
    tau = t - t0
    ys = y / scale
    span = tau[-1]
    min_rate = 1e-3 / span if min_rate is None else min_rate
    max_terms = n_terms if max_terms is None else max(max_terms, n_terms)
    best = None
    for n in range(n_terms, max_terms + 1):
        n_eff = min(n, (tau.size - 1) // 2)
        g0 = _pencil_exponents(ys, n_eff, dt)
        g0 = np.where(np.isfinite(g0), g0, min_rate)
        g0 = np.abs(g0.real).clip(min_rate) + 1j * g0.imag
        mu = 0.0
        while True:
            g = _refine(tau, ys, g0, min_rate, mu) if refine else g0
            c = _amplitudes(tau, ys, g, mu)
            cond = float(np.abs(c).sum())
            if cond <= max_condition or mu >= 1e-2:
                break
            mu = 1e-10 if mu == 0 else mu * 100
        resid = float(np.abs(np.exp(-np.outer(tau, g)) @ c - ys).max() * scale)
        if best is None or resid < best[0]:
            best = (resid, g, c, mu, cond)
        if target is None or resid <= target:
            break
    resid, g, c, mu, cond = best
    if target is not None and resid > target:
        raise FitError(f"exponential fit residual {resid:.3e} above target {target:.3e} with {max_terms} terms")
    # shift the time origin back to t = 0
    a = c * scale * np.exp(g * t0)
    return ExponentialSum(a, np.zeros_like(a), g, resid,
                          {"n_terms": int(g.size), "ridge": mu, "condition": cond})


def choose_order(phi_max: float, bound: float = 1e-6, cap: int = 60) -> int:
    """Smallest ``n`` with ``phi_max**(n+1) / (n+1)! * exp(phi_max) < bound``."""
    for n in range(1, cap + 1):
        if _truncation_bound(phi_max, n) < bound:
            return n
    raise ValueError(f"no expansion order up to {cap} reaches bound {bound:g} for |phi| = {phi_max:g}")


def _truncation_bound(phi_max: float, order: int) -> float:
    return float(phi_max ** (order + 1) / factorial(order + 1) * np.exp(phi_max))


@dataclass(frozen=True, eq=False)
class PartitionExpansion:
    """``exp(+-phi) - 1 = sum_l F_l exp(-Gamma_l t)`` truncated at ``order``.

    ``l`` runs over multisets of the terms of ``phi`` (integer partitions of
    length ``n_terms``) with ``1 <= |l| <= order``.
    """

    order: int
    F: np.ndarray
    Gamma: np.ndarray
    sign: int
    bound: float
    n_source: int

    @property
    def n_terms(self) -> int:
        return self.F.size

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for k in range(0, self.F.size, 4096):
            F = self.F[k : k + 4096]
            G = self.Gamma[k : k + 4096]
            out += np.exp(-np.multiply.outer(t, G)) @ F
        return out

    def rate(self, omega, t=np.inf):
        return rate_gamma(self, omega, t)


def correlation_expansion(phi: ExponentialSum, sign: int = 1, order: int | None = None,
                          bound: float = 1e-6, cap: int = 2_000_000, phi_max: float | None = None) -> PartitionExpansion:
    """Integer-partition expansion of ``exp(sign * phi(t)) - 1``.

    ``phi`` must have no linear-in-t parts.  The reported truncation bound is
    ``|phi|^(n+1)/(n+1)! * exp(|phi|)`` with ``|phi|`` the supremum of
    ``|phi(t)|`` (estimated on ``t >= 0`` samples unless ``phi_max`` is
    given), which bounds the Taylor remainder of the exponential.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if np.any(phi.b != 0):
        raise ValueError("partition expansion needs b_j = 0")
    m = phi.n_terms
    if m == 0:
        return PartitionExpansion(order or 1, np.zeros(0, complex), np.zeros(0, complex), sign, 0.0, 0)
    if phi_max is None:
        tmax = 40.0 / phi.gamma.real.min()
        ts = np.concatenate([np.linspace(0, 5.0 / phi.gamma.real.max(), 2000), np.linspace(0, tmax, 4000)])
        phi_max = float(np.abs(phi(ts)).max())
    if order is None:
        order = choose_order(phi_max, bound)
    if order < 1:
        raise ValueError("order must be >= 1")
    count = 0
    from math import comb

    count = comb(m + order, order) - 1
    if count > cap:
        raise ValueError(f"partition expansion needs {count} terms (cap {cap}); lower the order or the fit size")
    c = sign * phi.a
    g = phi.gamma
    # level-by-level construction of nondecreasing index tuples
    Fs, Gs = [c.copy()], [g.copy()]
    last = np.arange(m)
    mult = np.ones(m, dtype=int)
    F_lvl, G_lvl = c.copy(), g.copy()
    for _ in range(2, order + 1):
        reps = m - last
        parent = np.repeat(np.arange(F_lvl.size), reps)
        offs = np.arange(parent.size) - np.repeat(np.cumsum(reps) - reps, reps)
        new_last = last[parent] + offs
        new_mult = np.where(offs == 0, mult[parent] + 1, 1)
        F_lvl = F_lvl[parent] * c[new_last] / new_mult
        G_lvl = G_lvl[parent] + g[new_last]
        last, mult = new_last, new_mult
        Fs.append(F_lvl)
        Gs.append(G_lvl)
    return PartitionExpansion(order, np.concatenate(Fs), np.concatenate(Gs), sign, _truncation_bound(phi_max, order), m)


def rate_gamma(exp: PartitionExpansion | ExponentialSum, omega, t=np.inf):
    """``Gamma(w, t) = int_0^t exp(i w s) C(s) ds`` from closed-form terms.

    Terms with ``|Gamma_l - i w| < 1e-12`` use the limit ``F_l t``.
    """
    if isinstance(exp, ExponentialSum):
        return exp.rate(omega, t)
    omega = np.asarray(omega, dtype=float)
    shape = omega.shape
    w = omega.reshape(-1)
    out = np.zeros(w.size, dtype=complex)
    for k in range(0, exp.F.size, 8192):
        F = exp.F[k : k + 8192]
        G = exp.Gamma[k : k + 8192]
        z = G[None, :] - 1j * w[:, None]
        sing = np.abs(z) < 1e-12
        zs = np.where(sing, 1.0, z)
        if np.isinf(t):
            if np.any(sing):
                raise ZeroDivisionError("infinite-time rate diverges at a resonant term")
            val = F / zs
        else:
            val = np.where(sing, F * t, F * t * _phi1(zs * t))
        out += val.sum(axis=1)
    return out.reshape(shape)

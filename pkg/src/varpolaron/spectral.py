"""Spectral densities and frequency-domain quadrature.

All frequencies are angular frequencies in rad/ps (see :mod:`varpolaron.units`).
Every spectral density is an immutable object that maps ``omega >= 0`` to
``J(omega) >= 0`` and knows enough about its own shape (peak positions,
widths, tails) to build a quadrature grid that resolves it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import warnings
from math import factorial
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as _integrate

__all__ = [
    "SpectralDensity",
    "DrudeLorentz",
    "SuperOhmic",
    "AdolphsRenger",
    "ModeComb",
    "SumDensity",
    "FrequencyGrid",
    "eval_spectral_density",
    "reorganization_energy",
    "integrate_density",
    "fourier_density",
    "load_mode_file",
]


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested accuracy."""


class SpectralDensity:
    """Base class.  Subclasses implement :meth:`_evaluate` for ``omega >= 0``."""

    #: J(omega) ~ omega**s as omega -> 0
    low_frequency_exponent: float = 1.0
    #: True when J decays only algebraically, so integrals need an infinite tail
    heavy_tail: bool = False
    #: J(omega) ~ omega**h as omega -> inf for heavy-tailed densities
    high_frequency_exponent: float = -np.inf

    def __call__(self, omega):
        omega = np.asarray(omega, dtype=float)
        return self._evaluate(omega)

    def odd(self, omega):
        """Odd extension ``J(-w) = -J(w)`` used for two-sided spectra."""
        omega = np.asarray(omega, dtype=float)
        return np.sign(omega) * self._evaluate(np.abs(omega))

    def _evaluate(self, omega):  # pragma: no cover - abstract
        raise NotImplementedError

    def reorganization_energy(self) -> float:
        """Return ``int_0^inf J(w)/w dw``."""
        raise NotImplementedError

    def scale(self, factor: float) -> "SpectralDensity":
        """Return a copy with ``J`` multiplied by ``factor``."""
        raise NotImplementedError

    def features(self) -> list[tuple[float, float]]:
        """(centre, width) pairs of structure the quadrature must resolve."""
        raise NotImplementedError

    def omega_max(self) -> float:
        """Upper frequency beyond which the integrand is negligible or handled as a tail."""
        raise NotImplementedError

    def parts(self) -> list["SpectralDensity"]:
        return [self]


@dataclass(frozen=True)
class DrudeLorentz(SpectralDensity):
    """Sum of terms ``lam*gamma*w / ((w - wc)**2 + gamma**2)``.

    ``terms`` is a sequence of ``(lam, gamma, wc)`` triples.
    """

    terms: tuple[tuple[float, float, float], ...]
    low_frequency_exponent = 1.0
    heavy_tail = True
    high_frequency_exponent = -1.0

    def __post_init__(self):
        terms = tuple(tuple(float(x) for x in t) for t in self.terms)
        if not terms:
            raise ValueError("DrudeLorentz needs at least one term")
        for lam, gamma, wc in terms:
            if lam < 0 or gamma <= 0 or wc < 0:
                raise ValueError(f"invalid Drude-Lorentz term {(lam, gamma, wc)}")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def single(cls, lam: float, gamma: float, wc: float = 0.0) -> "DrudeLorentz":
        return cls(((lam, gamma, wc),))

    def _evaluate(self, omega):
        out = np.zeros_like(omega)
        for lam, gamma, wc in self.terms:
            out = out + lam * gamma * omega / ((omega - wc) ** 2 + gamma**2)
        return out

    def reorganization_energy(self):
        return float(sum(lam * (np.pi / 2 + np.arctan(wc / gamma)) for lam, gamma, wc in self.terms))

    def scale(self, factor):
        return DrudeLorentz(tuple((lam * factor, g, wc) for lam, g, wc in self.terms))

    def features(self):
        return [(wc, gamma) for _, gamma, wc in self.terms]

    def omega_max(self):
        return max(50.0 * max(gamma, wc) for _, gamma, wc in self.terms)


@dataclass(frozen=True)
class SuperOhmic(SpectralDensity):
    """``A * (w/wc)**3 * exp(-w/wc)``."""

    A: float
    wc: float
    low_frequency_exponent = 3.0

    def __post_init__(self):
        if self.A < 0 or self.wc <= 0:
            raise ValueError(f"invalid super-Ohmic parameters A={self.A}, wc={self.wc}")

    @classmethod
    def from_lambda(cls, lam: float, wc: float) -> "SuperOhmic":
        """Build ``lam * w**3 / wc**2 * exp(-w/wc)`` (dimensionless ``lam``)."""
        return cls(A=lam * wc, wc=wc)

    def _evaluate(self, omega):
        x = omega / self.wc
        return self.A * x**3 * np.exp(-x)

    def reorganization_energy(self):
        return 2.0 * self.A

    def scale(self, factor):
        return SuperOhmic(self.A * factor, self.wc)

    def features(self):
        return [(self.wc, self.wc)]

    def omega_max(self):
        return 50.0 * self.wc


@dataclass(frozen=True)
class AdolphsRenger(SpectralDensity):
    """Two-component ``w**5 exp(-sqrt(w/w_i))`` background density."""

    S: float
    s1: float
    s2: float
    w1: float
    w2: float
    low_frequency_exponent = 5.0

    def __post_init__(self):
        if self.S < 0 or self.s1 < 0 or self.s2 < 0 or self.s1 + self.s2 <= 0:
            raise ValueError("invalid Adolphs-Renger weights")
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("Adolphs-Renger frequencies must be positive")

    def _evaluate(self, omega):
        out = np.zeros_like(omega)
        norm = self.S / (self.s1 + self.s2)
        for s, w in ((self.s1, self.w1), (self.s2, self.w2)):
            out = out + norm * s / (factorial(7) * 2 * w**4) * omega**5 * np.exp(-np.sqrt(omega / w))
        return out

    def reorganization_energy(self):
        # int_0^inf w^4 exp(-sqrt(w/wi)) dw = 2 * 9! * wi^5
        norm = self.S / (self.s1 + self.s2)
        return float(norm * (self.s1 * 72.0 * self.w1 + self.s2 * 72.0 * self.w2))

    def scale(self, factor):
        return AdolphsRenger(self.S * factor, self.s1, self.s2, self.w1, self.w2)

    def features(self):
        # the w^5 exp(-sqrt(w/wi)) lobe peaks at 100*wi
        return [(100.0 * self.w1, 100.0 * self.w1), (100.0 * self.w2, 100.0 * self.w2)]

    def omega_max(self):
        return 3600.0 * max(self.w1, self.w2)


@dataclass(frozen=True)
class ModeComb(SpectralDensity):
    """Lorentzian-broadened underdamped modes with a shared linewidth ``gamma``.

    ``modes`` holds ``(S_n, w_n)`` pairs (Huang-Rhys factor, frequency).
    """

    modes: tuple[tuple[float, float], ...]
    gamma: float
    low_frequency_exponent = 1.0
    heavy_tail = True
    high_frequency_exponent = -3.0

    def __post_init__(self):
        modes = tuple((float(s), float(w)) for s, w in self.modes)
        if self.gamma <= 0:
            raise ValueError("mode linewidth must be positive")
        for s, w in modes:
            if s < 0 or w <= 0:
                raise ValueError(f"invalid mode (S={s}, w={w})")
        object.__setattr__(self, "modes", modes)

    def _arrays(self):
        if not self.modes:
            return np.zeros(0), np.zeros(0)
        arr = np.asarray(self.modes)
        return arr[:, 0], arr[:, 1]

    def _evaluate(self, omega):
        S, wn = self._arrays()
        g = self.gamma
        w = omega[..., None]
        num = 4.0 * w * g * wn * (wn**2 + g**2)
        den = np.pi * ((w - wn) ** 2 + g**2) * ((w + wn) ** 2 + g**2)
        return np.sum(S * num / den, axis=-1)

    def reorganization_energy(self):
        S, wn = self._arrays()
        return float(np.sum(S * wn))

    def scale(self, factor):
        return ModeComb(tuple((s * factor, w) for s, w in self.modes), self.gamma)

    def features(self):
        return [(w, self.gamma) for _, w in self.modes]

    def omega_max(self):
        if not self.modes:
            return 20.0 * self.gamma
        return max(w for _, w in self.modes) + 20.0 * self.gamma

    def clusters(self, size: int = 5) -> list["ModeComb"]:
        """Split into consecutive groups of ``size`` modes in frequency order."""
        ordered = sorted(self.modes, key=lambda m: m[1])
        return [ModeComb(tuple(ordered[k : k + size]), self.gamma) for k in range(0, len(ordered), size)]


@dataclass(frozen=True)
class SumDensity(SpectralDensity):
    components: tuple[SpectralDensity, ...] = field(default_factory=tuple)

    def __post_init__(self):
        flat = []
        for c in self.components:
            flat.extend(c.parts())
        object.__setattr__(self, "components", tuple(flat))

    @property
    def low_frequency_exponent(self):
        return min((c.low_frequency_exponent for c in self.components), default=np.inf)

    @property
    def heavy_tail(self):
        return any(c.heavy_tail for c in self.components)

    @property
    def high_frequency_exponent(self):
        return max((c.high_frequency_exponent for c in self.components), default=-np.inf)

    def _evaluate(self, omega):
        out = np.zeros_like(omega)
        for c in self.components:
            out = out + c._evaluate(omega)
        return out

    def reorganization_energy(self):
        return float(sum(c.reorganization_energy() for c in self.components))

    def scale(self, factor):
        return SumDensity(tuple(c.scale(factor) for c in self.components))

    def features(self):
        return [f for c in self.components for f in c.features()]

    def omega_max(self):
        return max((c.omega_max() for c in self.components), default=1.0)

    def parts(self):
        return list(self.components)


def eval_spectral_density(sd: SpectralDensity, omega):
    """Evaluate ``J(omega)``; negative frequencies are a domain error."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0):
        raise ValueError("spectral density is only defined for omega >= 0")
    out = sd(omega)
    return float(out) if out.ndim == 0 else out


def reorganization_energy(sd: SpectralDensity) -> float:
    return sd.reorganization_energy()


def _breakpoints(sd: SpectralDensity, upper: float) -> np.ndarray:
    pts = [0.0, upper]
    for centre, width in sd.features():
        for k in (-20, -5, -1, 0, 1, 5, 20):
            x = centre + k * width
            if 0 < x < upper:
                pts.append(x)
    return np.unique(pts)


def _safe_integrand(sd, func):
    # integrable integrands vanish or are skipped at the w = 0 endpoint
    def integrand(w):
        if w <= 0.0:
            return 0.0
        return float(sd(w)) * func(w)

    return integrand


def _quad_pieces(integrand, pts, tail_from, rtol, epsabs, limit, weight=None, wvar=None):
    total = 0.0
    err = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", _integrate.IntegrationWarning)
        for a, b in zip(pts[:-1], pts[1:]):
            val, e = _integrate.quad(
                integrand, a, b, epsabs=epsabs, epsrel=rtol, limit=limit, weight=weight, wvar=wvar
            )
            total += val
            err += e
        if tail_from is not None:
            if weight is None:
                val, e = _integrate.quad(integrand, tail_from, np.inf, epsabs=epsabs, epsrel=rtol, limit=limit)
            else:
                val, e = _integrate.quad(integrand, tail_from, np.inf, weight=weight, wvar=wvar, epsabs=epsabs, limlst=200)
            total += val
            err += e
    if not np.isfinite(total):
        raise QuadratureError("non-finite spectral integral")
    if err > 1e3 * max(rtol * abs(total), epsabs):
        raise QuadratureError(f"spectral integral error estimate {err:.3e} for value {total:.6e}")
    return total


def integrate_density(
    sd: SpectralDensity,
    func: Callable[[float], float],
    rtol: float = 1e-8,
    epsabs: float = 1e-13,
    upper: float | None = None,
    tail: bool | None = None,
    limit: int = 400,
) -> float:
    """Adaptive Gauss-Kronrod estimate of ``int_0^inf J(w) func(w) dw``.

    ``func`` is a scalar callable.  The domain is split at the density's
    features; an infinite tail is integrated when the density decays
    algebraically.
    """
    upper = sd.omega_max() if upper is None else upper
    tail = sd.heavy_tail if tail is None else tail
    pts = _breakpoints(sd, upper)

    integrand = _safe_integrand(sd, func)

    return _quad_pieces(integrand, pts, upper if tail else None, rtol, epsabs, limit)


def fourier_density(
    sd: SpectralDensity,
    func: Callable[[float], float],
    t: float,
    kind: str,
    rtol: float = 1e-10,
    epsabs: float = 1e-14,
    limit: int = 800,
) -> float:
    """``int_0^inf J(w) func(w) cos(w t) dw`` (``kind='cos'``) or the ``sin`` analogue.

    Oscillatory pieces use QUADPACK's weighted rules (QAWO / QAWF), which
    stay accurate where plain adaptive quadrature struggles.
    """
    if kind not in ("cos", "sin"):
        raise ValueError("kind must be 'cos' or 'sin'")
    if t == 0:
        if kind == "sin":
            return 0.0
        return integrate_density(sd, func, rtol=rtol, epsabs=epsabs, limit=limit)
    upper = sd.omega_max()
    pts = _breakpoints(sd, upper)

    integrand = _safe_integrand(sd, func)

    return _quad_pieces(
        integrand, pts, upper if sd.heavy_tail else None, rtol, epsabs, limit, weight=kind, wvar=t
    )


def _gauss_panels(edges: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    a = edges[:-1, None]
    b = edges[1:, None]
    nodes = 0.5 * (b - a) * x + 0.5 * (b + a)
    weights = 0.5 * (b - a) * w
    return nodes.ravel(), weights.ravel()


@dataclass(frozen=True)
class FrequencyGrid:
    """Fixed composite Gauss-Legendre rule on ``(0, inf)`` adapted to a density.

    The rule is used wherever the same integral is needed for many
    parameter values (variational sweeps) or many times (propagator
    sampling).  ``t_max`` bounds the oscillation ``cos(w t)`` the panels must
    resolve.
    """

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def for_density(
        cls,
        sd: SpectralDensity,
        t_max: float = 0.0,
        order: int = 16,
        panels_per_width: float = 2.0,
        tail_nodes: int = 48,
        tail_extend: float = 20.0,
        max_nodes: int = 400_000,
    ) -> "FrequencyGrid":
        upper = sd.omega_max()
        feats = sd.features()
        if sd.heavy_tail and t_max > 0:
            # the mapped tail cannot follow cos(w t); push it far enough out that
            # only a negligible slice of an algebraic tail is left to it
            budget = max_nodes / order * 10.0 / t_max
            factor = tail_extend if sd.high_frequency_exponent > -2 else 2.0
            upper = max(upper, min(factor * upper, budget))
        scales = [w for _, w in feats if w > 0] or [sd.omega_max() / 50.0]
        smallest = min(scales)
        # geometric panels resolve the power-law onset near w = 0
        h_global = max(scales) / 2.0
        if t_max > 0:
            h_global = min(h_global, 10.0 / t_max)
        x = min(smallest, h_global)
        low = np.geomspace(1e-7 * x, x, 30)
        edges = [0.0, *low]
        while x < upper:
            h = h_global
            for centre, width in feats:
                if abs(x - centre) < 25.0 * width:
                    h = min(h, width / panels_per_width)
            x = min(x + h, upper)
            edges.append(x)
        nodes, weights = _gauss_panels(np.asarray(edges), order)
        if sd.heavy_tail:
            # w = upper / u maps (0, 1] onto [upper, inf)
            u, wu = np.polynomial.legendre.leggauss(tail_nodes)
            u = 0.5 * (u + 1.0)
            wu = 0.5 * wu
            nodes = np.concatenate([nodes, upper / u])
            weights = np.concatenate([weights, wu * upper / u**2])
        return cls(nodes, weights)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate samples given on ``nodes`` along the last axis."""
        return values @ self.weights


def load_mode_file(path, gamma: float, freq_unit: float = 1.0) -> ModeComb:
    """Read a two-column (frequency, Huang-Rhys factor) text file.

    Lines starting with ``#`` are comments.  ``freq_unit`` converts the file's
    frequency column (cm^-1 by convention) into internal units.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected two columns (frequency, S)")
            w, s = float(parts[0]), float(parts[1])
            rows.append((s, w * freq_unit))
    return ModeComb(tuple(rows), gamma)


def combine(parts: Sequence[SpectralDensity]) -> SpectralDensity:
    parts = [p for p in parts if p is not None]
    if len(parts) == 1:
        return parts[0]
    return SumDensity(tuple(parts))

"""Variational-frame bath propagators, correlation tensors and rate tables.

Three propagators per site enter the master equation:

* ``phi_zz`` from the residual linear coupling, weight ``J (1-F)^2``;
* ``phi_xy`` from the displacement operators, weight ``J F^2 / w^2``;
* ``phi_yz`` from their overlap, weight ``J F (1-F) / w``.

The correlation function of every pair of system operators is a linear
combination of a small set of *basis functions* built from these
propagators (``phi_zz``, ``phi_yz``, ``exp(+-phi_xy) - 1`` per site and
``exp(+-(phi_n + phi_m)) - 1`` per coupled pair), so rates are computed once
per basis function and reused for every operator pair.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .expsum import ExponentialSum
from .network import Network
from .spectral import DrudeLorentz, FrequencyGrid, SpectralDensity, fourier_density
from .variational import VariationalSolution, _coth_half, displacement_function

__all__ = [
    "phi_xy",
    "phi_zz",
    "phi_yz",
    "matsubara_poles",
    "matsubara_series",
    "analytic_propagator",
    "PropagatorSet",
    "sample_propagators",
    "CorrelationTables",
    "assemble_correlation_tables",
    "brute_force_lambda",
    "spectrum_zz",
    "spectrum_yz",
    "filon_cumulative",
    "ScopeError",
]

log = logging.getLogger(__name__)


class ScopeError(ValueError):
    """Requested closed form does not apply to this spectral density."""


# ---------------------------------------------------------------- propagators


def _weights(omega, alpha, beta):
    """Scalar ``(F, coth(beta w/2))`` for the quadrature integrands."""
    t = 1.0 if math.isinf(beta) else math.tanh(0.5 * beta * omega)
    wt = omega * t
    return wt / (wt + alpha), 1.0 / t


def phi_xy(sd: SpectralDensity, alpha: float, beta: float, t: float) -> complex:
    """``int J F^2 / w^2 [coth(bw/2) cos(wt) - i sin(wt)] dw`` by adaptive quadrature."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if np.isinf(alpha):
        return 0.0j

    def fc(w):
        F, c = _weights(w, alpha, beta)
        return float(F**2 * c / w**2)

    def fs(w):
        F, _ = _weights(w, alpha, beta)
        return float(F**2 / w**2)

    return complex(fourier_density(sd, fc, t, "cos"), -fourier_density(sd, fs, t, "sin"))


def phi_zz(sd: SpectralDensity, alpha: float, beta: float, t: float) -> complex:
    """``int J (1-F)^2 [coth(bw/2) cos(wt) - i sin(wt)] dw``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if alpha == 0:
        return 0.0j

    def fc(w):
        F, c = _weights(w, alpha, beta)
        return float((1 - F) ** 2 * c)

    def fs(w):
        F, _ = _weights(w, alpha, beta)
        return float((1 - F) ** 2)

    return complex(fourier_density(sd, fc, t, "cos"), -fourier_density(sd, fs, t, "sin"))


def phi_yz(sd: SpectralDensity, alpha: float, beta: float, t: float) -> complex:
    """``int J F (1-F) / w [sin(wt) coth(bw/2) + i cos(wt)] dw``."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if alpha == 0 or np.isinf(alpha):
        return 0.0j

    def fs(w):
        F, c = _weights(w, alpha, beta)
        return float(F * (1 - F) * c / w)

    def fc(w):
        F, _ = _weights(w, alpha, beta)
        return float(F * (1 - F) / w)

    return complex(fourier_density(sd, fs, t, "sin"), fourier_density(sd, fc, t, "cos"))


def _occupation(nu, beta):
    """Bose factor for real ``nu != 0`` (``n(-nu) = -1 - n(nu)``)."""
    if np.isinf(beta):
        return np.where(nu > 0, 0.0, -1.0)
    return 1.0 / np.expm1(beta * nu)


def _regular(nu):
    nu = np.asarray(nu, dtype=float)
    tiny = 1e-9
    return np.where(np.abs(nu) < tiny, np.where(nu < 0, -tiny, tiny), nu)


def spectrum_zz(sd: SpectralDensity, alpha: float, beta: float, nu):
    """Two-sided spectrum ``S(nu)`` with ``phi_zz(t) = int S(nu) exp(-i nu t) dnu``."""
    nu = _regular(nu)
    a = np.abs(nu)
    F = displacement_function(a, alpha, beta)
    return np.sign(nu) * sd(a) * (1 - F) ** 2 * (1.0 + _occupation(nu, beta))


def spectrum_yz(sd: SpectralDensity, alpha: float, beta: float, nu):
    """Two-sided spectrum of ``phi_yz`` (purely imaginary)."""
    nu = _regular(nu)
    a = np.abs(nu)
    if alpha == 0 or np.isinf(alpha):
        return np.zeros_like(nu, dtype=complex)
    F = displacement_function(a, alpha, beta)
    h = sd(a) * F * (1 - F) / a
    return 1j * h * (1.0 + _occupation(nu, beta))


# ------------------------------------------------------------ Matsubara poles


def matsubara_series(alpha: float, beta: float, n: int) -> complex:
    """Displaced Taylor-series estimate of the ``n``-th shifted pole (``n >= 1``)."""
    if n < 1:
        raise ValueError("the series is defined for n >= 1")
    ab = alpha * beta
    pi = np.pi
    num = (
        -128 * pi**4 * ab**2 * n**4 * (ab + 6)
        - 15 * ab**4 * (ab + 4) ** 3
        + 3072 * pi**8 * n**8
        + 1536 * pi**6 * ab * n**6
        + 4 * pi**2 * ab**3 * n**2 * (3 * ab**2 + 64 * ab + 192)
    )
    return 1j * num / (1536 * pi**7 * beta * n**7)


def matsubara_poles(alpha: float, beta: float, n_m: int, with_flags: bool = False):
    """Upper-half-plane roots ``x_k = i y_k`` of ``w + alpha coth(beta w/2) = 0``.

    ``k = 0 .. n_m - 1``.  ``y_0`` lies in ``(0, pi T)`` and ``y_k`` in
    ``(2 pi k T, (2k+1) pi T)``.  The series estimate seeds a bracketed root
    polish of ``y = alpha cot(beta y / 2)``.
    """
    if n_m < 1:
        raise ValueError("n_m must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not np.isfinite(beta) or beta <= 0:
        raise ValueError("poles need a finite positive temperature")
    T = 1.0 / beta
    x = np.empty(n_m, dtype=complex)
    polished = np.ones(n_m, dtype=bool)
    for k in range(n_m):
        lo = 2 * np.pi * k * T
        hi = (2 * k + 1) * np.pi * T
        if alpha == 0:
            x[k] = 1j * lo
            continue

        def f(y):
            return y * np.sin(0.5 * beta * y) - alpha * np.cos(0.5 * beta * y)

        guess = np.sqrt(2 * alpha * T) if k == 0 else matsubara_series(alpha, beta, k).imag
        eps = 1e-15 * max(hi, 1.0)
        a, b = lo + eps, hi - eps
        try:
            if k == 0:
                a = 0.0
            y = optimize.brentq(f, a, b, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
        except (ValueError, RuntimeError):
            warnings.warn(f"pole {k} polish failed; using series value", RuntimeWarning, stacklevel=2)
            y = guess
            polished[k] = False
        x[k] = 1j * y
    return (x, polished) if with_flags else x


def _dl_residue_terms(lam, gamma, alpha, beta, y):
    """Coefficients of the double-pole terms at ``x = i y``."""
    x = 1j * y
    c = -x / alpha
    Dp = 1.0 + 0.5 * beta * (y**2 / alpha + alpha)
    Dpp = alpha * 0.5 * beta**2 * c * (c**2 - 1.0)
    q = 1.0 / Dp
    qp = -Dpp / (2.0 * Dp**2)
    J = lam * gamma * x / (x**2 + gamma**2)
    Jp = lam * gamma * (gamma**2 - x**2) / (x**2 + gamma**2) ** 2
    w = J * (c - 1.0)
    wp = Jp * (c - 1.0) - J * 0.5 * beta * (c**2 - 1.0)
    a = np.pi * 1j * (2 * q * qp * w + q**2 * wp)
    b = -np.pi * q**2 * w
    return a, b


def analytic_propagator(sd: SpectralDensity, alpha: float, beta: float, n_m: int | None = None,
                        rtol: float = 1e-6, cap: int = 512) -> ExponentialSum:
    """Residue-theorem ``phi_xy`` for a single zero-centred Drude-Lorentz term.

    One term from the pole of ``J`` at ``i gamma`` plus second-order terms at
    each shifted Matsubara pole.  With ``n_m = None`` poles are added until
    ``phi(0)`` changes by less than ``rtol`` (relative), up to ``cap``.
    """
    if not isinstance(sd, DrudeLorentz) or len(sd.terms) != 1 or sd.terms[0][2] != 0:
        raise ScopeError("analytic propagator needs one Drude-Lorentz term with wc = 0; use fit_exponentials")
    if alpha <= 0 or not np.isfinite(alpha):
        raise ScopeError("analytic propagator needs 0 < alpha < inf")
    lam, gamma, _ = sd.terms[0]
    x_j = 1j * gamma
    coth_j = 1.0 / np.tanh(0.5 * beta * x_j)
    D_j = x_j + alpha * coth_j
    a_m1 = np.pi * 1j * 0.5 * lam * gamma * (coth_j - 1.0) / D_j**2
    a_list = [a_m1]
    b_list = [0.0]
    g_list = [gamma]
    auto = n_m is None
    n_target = cap if auto else n_m
    total = a_m1
    prev = None
    chunk = 16
    k = 0
    while k < n_target:
        kk = min(k + chunk, n_target) if auto else n_target
        poles = matsubara_poles(alpha, beta, kk)[k:kk]
        y = poles.imag
        a, b = _dl_residue_terms(lam, gamma, alpha, beta, y)
        for j in range(y.size):
            a_list.append(a[j])
            b_list.append(b[j])
            g_list.append(y[j])
            total = total + a[j]
            if auto and j > 0 and prev is not None and abs(total - prev) <= rtol * abs(total):
                n_target = k + j + 1
                break
            prev = total
        k = kk
        if auto and len(a_list) - 1 >= n_target:
            break
    n_used = len(a_list) - 1
    return ExponentialSum(np.array(a_list), np.array(b_list), np.array(g_list), meta={"n_m": n_used})


# ----------------------------------------------------------- sampled tables


@dataclass(eq=False)
class PropagatorSet:
    """Per-site propagators sampled on a uniform time grid.

    ``dxy`` holds ``phi_xy(t) - phi_xy(0)``, which stays finite when the
    renormalization integral diverges.
    """

    times: np.ndarray
    xy: np.ndarray
    zz: np.ndarray
    yz: np.ndarray
    alpha: np.ndarray
    dxy: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dxy is None:
            self.dxy = self.xy - self.xy[:, :1]

    @property
    def n_sites(self) -> int:
        return self.xy.shape[0]


def _fourier_rows(grid: FrequencyGrid, C, S, times):
    """``sum_k w_k (C[..., k] (cos(w_k t) - 1) + S[..., k] sin(w_k t))`` per row and time.

    The ``cos - 1`` form is evaluated as ``-2 sin^2(w t / 2)`` so that rows
    with a non-integrable ``t = 0`` value still give accurate differences.
    On uniform grids the half-angle phases come from products of two
    precomputed exponentials instead of trigonometric calls per entry.
    """
    nodes = grid.nodes
    out = np.empty(C.shape[:-1] + (times.size,))
    Cw = C * grid.weights
    Sw = S * grid.weights
    step = max(1, int(2e6 // max(nodes.size, 1)))
    uniform = times.size > 2 and np.allclose(np.diff(times), times[1] - times[0], rtol=1e-12, atol=0)
    if uniform:
        dt = times[1] - times[0]
        inner = np.exp(0.5j * np.multiply.outer(nodes, dt * np.arange(min(step, times.size))))
    for s in range(0, times.size, step):
        blk = times[s : s + step]
        if uniform:
            z = np.exp(0.5j * nodes * times[s])[:, None] * inner[:, : blk.size]
            sh, ch = z.imag, z.real
        else:
            half = 0.5 * np.multiply.outer(nodes, blk)
            sh, ch = np.sin(half), np.cos(half)
        out[..., s : s + step] = Cw @ (-2.0 * sh * sh) + Sw @ (2.0 * sh * ch)
    return out


def sample_propagators(
    baths: Sequence[SpectralDensity],
    alpha: np.ndarray,
    beta: float,
    times: np.ndarray,
    order: int = 16,
) -> PropagatorSet:
    """Sample ``phi_xy``, ``phi_zz`` and ``phi_yz`` for every site on ``times``.

    Sites sharing a bath and an ``alpha`` are computed once, and all sites
    sharing a bath share one trigonometric table.
    """
    times = np.asarray(times, dtype=float)
    n = len(baths)
    alpha = np.asarray(alpha, dtype=float)
    xy = np.zeros((n, times.size), dtype=complex)
    dxy = np.zeros_like(xy)
    zz = np.zeros_like(xy)
    yz = np.zeros_like(xy)
    t_max = float(times.max(initial=0.0))
    # group distinct (bath, alpha) by bath
    groups: list[tuple[SpectralDensity, list[float], list[list[int]]]] = []
    for i, sd in enumerate(baths):
        grp = next((g for g in groups if g[0] is sd or g[0] == sd), None)
        if grp is None:
            grp = (sd, [], [])
            groups.append(grp)
        a = float(alpha[i])
        if a in grp[1]:
            grp[2][grp[1].index(a)].append(i)
        else:
            grp[1].append(a)
            grp[2].append([i])
    for sd, alphas, members in groups:
        grid = FrequencyGrid.for_density(sd, t_max=t_max, order=order)
        w = grid.nodes
        J = sd(w)
        coth = _coth_half(w, beta)
        zero = np.zeros_like(w)
        Cr, Sr = [], []
        for a in alphas:
            F = displacement_function(w, a, beta)
            # real part, imaginary part per propagator
            Cr += [J * F**2 * coth / w**2, zero, J * (1 - F) ** 2 * coth, zero, zero, J * F * (1 - F) / w]
            Sr += [zero, -J * F**2 / w**2, zero, -J * (1 - F) ** 2, J * F * (1 - F) * coth / w, zero]
        Cr, Sr = np.array(Cr), np.array(Sr)
        at0 = (Cr @ grid.weights).reshape(len(alphas), 6)
        vals = _fourier_rows(grid, Cr, Sr, times).reshape(len(alphas), 6, times.size)
        for k, idx in enumerate(members):
            v = vals[k] + at0[k][:, None]
            dxy[idx] = vals[k][0] + 1j * vals[k][1]
            xy[idx] = v[0] + 1j * v[1]
            zz[idx] = v[2] + 1j * v[3]
            yz[idx] = v[4] + 1j * v[5]
    return PropagatorSet(times, xy, zz, yz, alpha.copy(), dxy)


def _filon_weights(theta):
    """Weights of a linear segment: ``int_0^1 (g0 (1-u) + g1 u) exp(-i theta u) du``."""
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < 1e-3
    ts = np.where(small, 1.0, theta)
    e = np.exp(-1j * ts)
    b = (e * (1 + 1j * ts) - 1) / ts**2
    a = (1 - e) / (1j * ts) - b
    # series: a = 1/2 - i t/6 - t^2/24, b = 1/2 - i t/3 - t^2/8
    a_s = 0.5 - 1j * theta / 6 - theta**2 / 24 + 1j * theta**3 / 120
    b_s = 0.5 - 1j * theta / 3 - theta**2 / 8 + 1j * theta**3 / 30
    return np.where(small, a_s, a), np.where(small, b_s, b)


def _filon_linear(g, dt, omega, stride):
    m = g.shape[-1]
    theta = omega * dt
    a, b = _filon_weights(theta)
    t = np.arange(m - 1) * dt
    phase = np.exp(-1j * np.multiply.outer(omega, t))
    seg = dt * phase[None] * (g[:, None, :-1] * a[None, :, None] + g[:, None, 1:] * b[None, :, None])
    cum = np.concatenate([np.zeros(seg.shape[:-1] + (1,), complex), np.cumsum(seg, axis=-1)], axis=-1)
    return cum[..., ::stride]


def filon_cumulative(g: np.ndarray, dt: float, omega: np.ndarray, stride: int = 1) -> np.ndarray:
    """``int_0^{t_k} g(s) exp(-i w s) ds`` for samples ``g`` on a uniform grid.

    Piecewise-linear Filon rule with one Richardson step against the
    doubled grid (fourth order for smooth ``g``).  ``g`` has shape
    ``(n_funcs, m)`` with ``m`` odd; returns ``(n_funcs, n_omega, len)``
    sampled every ``stride`` fine points (``stride`` even).
    """
    g = np.atleast_2d(np.asarray(g, dtype=complex))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    m = g.shape[-1]
    if m % 2 == 0:
        raise ValueError("filon_cumulative needs an odd number of samples")
    if stride % 2:
        raise ValueError("stride must be even")
    fine = _filon_linear(g, dt, omega, stride)
    coarse = _filon_linear(g[:, ::2], 2 * dt, omega, stride // 2)
    return (4.0 * fine - coarse) / 3.0


# ------------------------------------------------------- correlation tensors


@dataclass(eq=False)
class CorrelationTables:
    """Operator list, basis functions and the coefficient map between them.

    Operators are ordered ``z_0..z_{N-1}`` then ``x_nm`` and ``y_nm`` for each
    coupled pair ``n < m``.  ``coeffs`` maps ``(i, j)`` operator pairs to
    ``{basis_index: coefficient}`` so that
    ``Lambda_ij(t) = sum_f coeffs[i, j][f] * basis_values[f](t)``.
    """

    n_sites: int
    pairs: list[tuple[int, int]]
    op_kind: list[tuple[str, int, int]]
    basis: list[tuple]
    coeffs: dict
    solution: VariationalSolution
    propagators: PropagatorSet | None = None

    @property
    def n_ops(self) -> int:
        return len(self.op_kind)

    def basis_values(self, props: PropagatorSet | None = None) -> np.ndarray:
        """Sample every basis function on the propagator time grid.

        Displacement functions carry their renormalization factors,
        ``site``: ``B_s^2 (exp(+-phi_s) - 1)`` and ``pair``:
        ``B_n^2 B_m^2 (exp(+-(phi_n + phi_m)) - 1)``, written through
        ``phi(t) - phi(0)`` and ``B^2 = exp(-phi(0))`` so they stay finite
        when ``B = 0``.
        """
        props = props or self.propagators
        B2 = self.solution.B ** 2
        out = np.empty((len(self.basis), props.times.size), dtype=complex)
        for f, key in enumerate(self.basis):
            kind = key[0]
            if kind == "zz":
                out[f] = props.zz[key[1]]
            elif kind == "yz":
                out[f] = props.yz[key[1]]
            elif kind == "site":
                s, sg = key[1], key[2]
                out[f] = _shifted_exp(sg * props.dxy[s], B2[s], sg) - B2[s]
            elif kind == "pair":
                a, b, sg = key[1], key[2], key[3]
                b2 = B2[a] * B2[b]
                out[f] = _shifted_exp(sg * (props.dxy[a] + props.dxy[b]), b2, sg) - b2
            else:  # pragma: no cover
                raise KeyError(kind)
        return out

    def lambda_matrix(self, props: PropagatorSet | None = None, k: int = 0) -> np.ndarray:
        """Dense ``Lambda_ij`` at the ``k``-th sample time (for checks)."""
        vals = self.basis_values(props)[:, k]
        L = np.zeros((self.n_ops, self.n_ops), dtype=complex)
        for (i, j), cf in self.coeffs.items():
            L[i, j] = sum(c * vals[f] for f, c in cf.items())
        return L


def _shifted_exp(x, b2, sign):
    """``b2 * exp(sign * phi)`` given ``x = sign * (phi - phi0)`` and ``b2 = exp(-phi0)``."""
    if sign > 0:
        return np.exp(x)
    return b2 * b2 * np.exp(x)


def assemble_correlation_tables(solution: VariationalSolution, baths: Sequence[SpectralDensity], net: Network,
                                props: PropagatorSet | None = None, coupling_cutoff: float = 0.0) -> CorrelationTables:
    """Build the sparse correlation structure for a variational solution.

    Only index-sharing pair combinations are materialized.  Coefficients
    hold the coupling products and the renormalization factors of the
    non-shared sites; the shared-site factors sit in the basis functions so a
    vanishing renormalization (divergent polaron limit) still leaves the
    incoherent hopping terms.
    """
    n = net.n_sites
    if len(baths) != n:
        raise ValueError("missing spectral density for some site")
    if props is not None and props.n_sites != n:
        raise ValueError("propagator set does not match the network")
    V = net.couplings
    B = solution.B
    weak = np.isinf(solution.alpha)
    # pairs of undisplaced sites carry no displacement correlations
    pairs = [
        (a, b)
        for a in range(n)
        for b in range(a + 1, n)
        if abs(V[a, b]) > coupling_cutoff and not (weak[a] and weak[b])
    ]
    op_kind = [("z", a, a) for a in range(n)]
    x_index, y_index = {}, {}
    for a, b in pairs:
        x_index[(a, b)] = len(op_kind)
        op_kind.append(("x", a, b))
        y_index[(a, b)] = len(op_kind)
        op_kind.append(("y", a, b))
    basis: list[tuple] = []
    bidx: dict[tuple, int] = {}

    def fidx(key):
        if key not in bidx:
            bidx[key] = len(basis)
            basis.append(key)
        return bidx[key]

    coeffs: dict = {}

    def add(i, j, key, c):
        if c == 0:
            return
        d = coeffs.setdefault((i, j), {})
        f = fidx(key)
        d[f] = d.get(f, 0.0) + c

    polaron = solution.alpha == 0
    for a in range(n):
        if not polaron[a]:
            add(a, a, ("zz", a), 1.0)
    by_site: dict[int, list[tuple[int, int]]] = {}
    for pr in pairs:
        for s in pr:
            by_site.setdefault(s, []).append(pr)
    for p1 in pairs:
        n1, m1 = p1
        # identical pairs: X = -(phi_n + phi_m); B_n^2 B_m^2 lives in the basis
        pref = 0.5 * V[n1, m1] ** 2
        xi, yi = x_index[p1], y_index[p1]
        add(xi, xi, ("pair", n1, m1, 1), pref)
        add(xi, xi, ("pair", n1, m1, -1), pref)
        add(yi, yi, ("pair", n1, m1, 1), pref)
        add(yi, yi, ("pair", n1, m1, -1), -pref)
    for s, prs in by_site.items():
        for p1 in prs:
            for p2 in prs:
                if p1 == p2:
                    continue
                # exactly one shared site: X = sign * phi_s; B_s^2 lives in the basis
                o1 = p1[1] if p1[0] == s else p1[0]
                o2 = p2[1] if p2[0] == s else p2[0]
                pref = 0.5 * V[p1] * V[p2] * B[o1] * B[o2]
                sign = _shared_sign(p1, p2, s)
                add(x_index[p1], x_index[p2], ("site", s, 1), pref)
                add(x_index[p1], x_index[p2], ("site", s, -1), pref)
                add(y_index[p1], y_index[p2], ("site", s, sign), -pref)
                add(y_index[p1], y_index[p2], ("site", s, -sign), pref)
    # linear/displacement overlap
    for (a, b) in pairs:
        for s, sgn in ((a, 1.0), (b, -1.0)):
            if polaron[s] or np.isinf(solution.alpha[s]):
                continue
            c = sgn * V[a, b] * B[a] * B[b]
            add(s, y_index[(a, b)], ("yz", s), -c)
            add(y_index[(a, b)], s, ("yz", s), c)
    return CorrelationTables(n, pairs, op_kind, basis, coeffs, solution, props)


def _shared_sign(p1, p2, s):
    """Sign of ``X = (d_nq - d_np) phi_n + (d_mp - d_mq) phi_m`` for one shared site ``s``."""
    n, m = p1
    p, q = p2
    X = 0
    if s == n:
        X = (s == q) - (s == p)
    elif s == m:
        X = (s == p) - (s == q)
    return int(X)


def brute_force_lambda(solution: VariationalSolution, net: Network, xy, zz, yz) -> np.ndarray:
    """Dense ``Lambda_ij`` from the closed-form bath averages by a quadruple loop.

    ``xy``, ``zz`` and ``yz`` are per-site propagator values at one time.
    Operator order as in :class:`CorrelationTables` with all pairs ``n < m``
    kept.  Intended as a test oracle.
    """
    n = net.n_sites
    V = net.couplings
    B = solution.B
    ops = [("z", a, a) for a in range(n)]
    for a in range(n):
        for b in range(a + 1, n):
            ops += [("x", a, b), ("y", a, b)]
    L = np.zeros((len(ops), len(ops)), dtype=complex)
    d = lambda i, j: 1.0 if i == j else 0.0
    for i, (ki, n1, m1) in enumerate(ops):
        for j, (kj, n2, m2) in enumerate(ops):
            if ki == "z" and kj == "z":
                L[i, j] = d(n1, n2) * zz[n1]
            elif ki == "z" and kj == "y":
                L[i, j] = -(d(n1, n2) - d(n1, m2)) * V[n2, m2] * B[n2] * B[m2] * yz[n1]
            elif ki == "y" and kj == "z":
                L[i, j] = (d(n2, n1) - d(n2, m1)) * V[n1, m1] * B[n1] * B[m1] * yz[n2]
            elif ki in "xy" and kj in "xy" and ki == kj:
                X = (d(n1, m2) - d(n1, n2)) * xy[n1] + (d(m1, n2) - d(m1, m2)) * xy[m1]
                pref = 0.5 * V[n1, m1] * V[n2, m2] * B[n1] * B[m1] * B[n2] * B[m2]
                if ki == "x":
                    L[i, j] = pref * (np.expm1(X) + np.expm1(-X))
                else:
                    L[i, j] = -pref * (np.expm1(X) - np.expm1(-X))
    return L

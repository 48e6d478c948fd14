"""Reduced dynamics: variational-frame TCL2 and a weak-coupling Redfield baseline.

The TCL2 generator is

    drho/dt = -i[H0, rho] - sum_i [S_i, Xi_i(t) rho - rho Xi_i(t)^dag],
    Xi_i(t) = sum_j int_0^t Lambda_ij(s) S_j(-s) ds,

with ``S_j(-s) = exp(-i H0 s) S_j exp(i H0 s)``.  In the eigenbasis of
``H0`` this reads ``(Xi_i)_ab = sum_j (S_j)_ab K_ij(w_ab, t)`` where
``K_ij(w, t) = int_0^t Lambda_ij(s) exp(-i w s) ds``.  Everything is done in
the eigenbasis; states are returned in the site basis.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, linalg
from scipy.sparse.linalg import expm_multiply

from .correlation import (
    CorrelationTables,
    assemble_correlation_tables,
    filon_cumulative,
    sample_propagators,
    spectrum_yz,
    spectrum_zz,
)
from .network import Network
from .spectral import FrequencyGrid, SpectralDensity
from .variational import (
    RenormalizedHamiltonian,
    VariationalSolution,
    fixed_solution,
    solve_self_consistent,
)

__all__ = [
    "SystemOperators",
    "build_system_operators",
    "RateEngine",
    "TCL2Generator",
    "tcl2_generator",
    "Trajectory",
    "PropagationError",
    "propagate",
    "variational_dynamics",
    "redfield_generator",
    "bloch_redfield_propagate",
    "polaron_limit_propagate",
    "site_state",
    "eigenstate",
]

log = logging.getLogger(__name__)

POPULATION_SLACK = 1e-6
TRACE_ABORT = 1e-6
BOHR_TOL = 1e-9


class PropagationError(RuntimeError):
    """Stepper failure or trace drift beyond the abort threshold."""

    def __init__(self, msg: str, diagnostics: dict | None = None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


# ------------------------------------------------------------------ operators


@dataclass(frozen=True, eq=False)
class SystemOperators:
    """Site-basis system operators and the eigen-decomposition of ``H0``."""

    Sz: np.ndarray
    Sx: np.ndarray
    Sy: np.ndarray
    pairs: tuple
    energies: np.ndarray
    vectors: np.ndarray
    bohr: np.ndarray
    bohr_index: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.energies.size

    @property
    def n_ops(self) -> int:
        return self.Sz.shape[0] + self.Sx.shape[0] + self.Sy.shape[0]

    def all_operators(self) -> np.ndarray:
        return np.concatenate([self.Sz, self.Sx, self.Sy])

    def operators(self, op_kind: Sequence[tuple]) -> np.ndarray:
        """Site-basis operators in the order of ``op_kind`` (``('z'|'x'|'y', n, m)``)."""
        pidx = {p: k for k, p in enumerate(self.pairs)}
        out = []
        for kind, a, b in op_kind:
            if kind == "z":
                out.append(self.Sz[a])
            elif kind == "x":
                out.append(self.Sx[pidx[(a, b)]])
            elif kind == "y":
                out.append(self.Sy[pidx[(a, b)]])
            else:
                raise KeyError(kind)
        return np.array(out).reshape(len(out), self.n_sites, self.n_sites)

    def to_eigen(self, A: np.ndarray) -> np.ndarray:
        U = self.vectors
        return U.conj().T @ A @ U

    def to_site(self, A: np.ndarray) -> np.ndarray:
        U = self.vectors
        return U @ A @ U.conj().T


def build_system_operators(H: RenormalizedHamiltonian | np.ndarray, tol: float = BOHR_TOL) -> SystemOperators:
    """Projectors, pair operators and the eigenbasis of ``H``.

    Bohr frequencies ``w_ab = E_a - E_b`` are deduplicated within ``tol``.
    """
    Hm = H.matrix() if isinstance(H, RenormalizedHamiltonian) else np.asarray(H)
    if not np.allclose(Hm, Hm.conj().T, atol=1e-12 * max(1.0, np.abs(Hm).max())):
        raise ValueError("Hamiltonian is not Hermitian")
    n = Hm.shape[0]
    try:
        E, U = linalg.eigh(Hm)
    except linalg.LinAlgError as exc:  # pragma: no cover
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    Sz = np.zeros((n, n, n), dtype=complex)
    for a in range(n):
        Sz[a, a, a] = 1.0
    pairs = tuple((a, b) for a in range(n) for b in range(a + 1, n))
    Sx = np.zeros((len(pairs), n, n), dtype=complex)
    Sy = np.zeros_like(Sx)
    for k, (a, b) in enumerate(pairs):
        Sx[k, a, b] = Sx[k, b, a] = 1.0
        Sy[k, a, b] = 1j
        Sy[k, b, a] = -1j
    w = (E[:, None] - E[None, :]).ravel()
    order = np.argsort(w, kind="stable")
    ws = w[order]
    new = np.concatenate([[True], np.diff(ws) > tol])
    gid = np.cumsum(new) - 1
    bohr = ws[new]
    idx = np.empty(w.size, dtype=int)
    idx[order] = gid
    return SystemOperators(Sz, Sx, Sy, pairs, E, U, bohr, idx.reshape(n, n))


# ---------------------------------------------------------------- rate engine


def _bandwidth(sd: SpectralDensity, q: float = 0.999) -> float:
    """Frequency below which a fraction ``q`` of ``int J dw`` sits (finite range)."""
    grid = FrequencyGrid.for_density(sd)
    w = grid.nodes
    m = sd(w) * grid.weights
    keep = w <= sd.omega_max()
    w, m = w[keep], m[keep]
    c = np.cumsum(m)
    if c[-1] <= 0:
        return float(w.max(initial=1.0))
    return float(w[np.searchsorted(c, q * c[-1])])


class RateEngine:
    """Memoized table of ``G_f(w, t) = int_0^t g_f(s) exp(-i w s) ds``.

    ``g_f`` runs over the basis functions of the correlation tables and
    ``w`` over the distinct Bohr frequencies.  Values are tabulated on a
    uniform refresh grid of spacing ``refresh`` and interpolated linearly in
    between.  Beyond the memory time ``t_memory`` (every basis function
    below ``memory_tol`` of its peak) the infinite-time values are used.

    In ``markov`` mode every lookup returns the infinite-time limit; the
    real part of the linear ``zz`` functions and the imaginary part of the
    ``yz`` functions then come from their exact spectral form ``pi S(-w)``.
    """

    def __init__(
        self,
        tables: CorrelationTables,
        baths: Sequence[SpectralDensity],
        beta: float,
        omegas: np.ndarray,
        t_end: float,
        refresh: float = 0.005,
        dt: float | None = None,
        markov: bool = False,
        memory_tol: float = 1e-6,
        markov_horizon: float = 20.0,
        order: int = 16,
    ):
        self.tables = tables
        self.baths = list(baths)
        self.beta = beta
        self.omegas = np.asarray(omegas, dtype=float)
        self.markov = markov
        self.memory_tol = memory_tol
        self.refresh = float(refresh)
        if self.refresh <= 0:
            raise ValueError("refresh spacing must be positive")
        alpha = tables.solution.alpha
        if dt is None:
            wq = max((_bandwidth(sd) for sd in set_unique(self.baths)), default=1.0)
            dt = float(np.clip(0.15 / wq, 1e-4, 2e-3))
        stride = 2 * max(1, int(np.ceil(self.refresh / (2 * dt))))
        self.dt = self.refresh / stride
        self.stride = stride
        horizon = markov_horizon if markov else max(t_end, self.refresh)
        n_f = len(tables.basis)
        if n_f == 0:
            self.t_memory = 0.0
            self.table = np.zeros((0, self.omegas.size, 1), dtype=complex)
            self.g = np.zeros((0, 1), dtype=complex)
            self.G_inf = np.zeros((0, self.omegas.size), dtype=complex)
            self.decayed = True
            self.times = np.zeros(1)
            return
        # non-Markov runs need the whole horizon anyway; Markov limits grow a window
        T = min(horizon, 2.0) if markov else horizon
        while True:
            last_pass = T >= horizon * (1 - 1e-9)
            n_ref = max(1, int(np.ceil(T / self.refresh - 1e-6)))
            s = np.arange(n_ref * stride + 1) * self.dt
            props = sample_propagators(self.baths, alpha, beta, s, order=order)
            g = tables.basis_values(props)
            peak = np.abs(g).max(axis=1, keepdims=True)
            above = np.abs(g) >= memory_tol * np.where(peak > 0, peak, 1.0)
            above &= peak > 0
            hits = np.nonzero(above.any(axis=0))[0]
            t_mem = float(s[hits[-1]]) if hits.size else 0.0
            decayed = t_mem < 0.75 * s[-1]
            if decayed or last_pass:
                break
            T = min(horizon, 2 * T)
        self.decayed = decayed
        self.t_memory = t_mem if decayed else np.inf
        if not decayed:
            log.info("bath correlations not decayed by %.3g ps; rates stay time dependent", T)
        self.g = g
        self.props = props
        self.times = s[::stride]
        self.table = self._cumulative(g)
        self.G_inf = self.table[:, :, -1].copy()
        if markov:
            if not decayed:
                log.warning("Markov rates from a correlation window of %.3g ps that has not fully decayed", T)
            self._exact_linear_parts()

    def _cumulative(self, g):
        n_f, m = g.shape
        n_w = self.omegas.size
        out = np.empty((n_f, n_w, m // self.stride + 1), dtype=complex)
        chunk = max(1, int(2e6 // max(n_w * m, 1)))
        for k in range(0, n_f, chunk):
            out[k : k + chunk] = filon_cumulative(g[k : k + chunk], self.dt, self.omegas, self.stride)
        return out

    def _exact_linear_parts(self):
        sol = self.tables.solution
        for f, key in enumerate(self.tables.basis):
            if key[0] == "zz":
                n = key[1]
                S = spectrum_zz(self.baths[n], sol.alpha[n], self.beta, -self.omegas)
                self.G_inf[f] = np.pi * S.real + 1j * self.G_inf[f].imag
            elif key[0] == "yz":
                n = key[1]
                S = spectrum_yz(self.baths[n], sol.alpha[n], self.beta, -self.omegas)
                self.G_inf[f] = self.G_inf[f].real + 1j * np.pi * S.imag

    @property
    def t_freeze(self) -> float:
        """First refresh time from which rates are constant."""
        if self.markov:
            return 0.0
        if not np.isfinite(self.t_memory):
            return np.inf
        return float(np.ceil(self.t_memory / self.refresh - 1e-9) * self.refresh)

    def refresh_index(self, t: float) -> int:
        return int(np.floor(t / self.refresh + 1e-9))

    def at_refresh(self, j: int) -> np.ndarray:
        if self.markov or j >= self.table.shape[2] or j * self.refresh >= self.t_freeze:
            return self.G_inf
        return self.table[:, :, j]

    def __call__(self, t: float) -> np.ndarray:
        """``G_f(w_u, t)`` with linear interpolation between refresh points."""
        if t < 0:
            raise ValueError("t must be >= 0")
        if self.markov or t >= self.t_freeze:
            return self.G_inf
        j = self.refresh_index(t)
        th = t / self.refresh - j
        if th < 1e-12:
            return self.at_refresh(j)
        return (1 - th) * self.at_refresh(j) + th * self.at_refresh(j + 1)


def set_unique(items):
    out = []
    for x in items:
        if not any(x is y or x == y for y in out):
            out.append(x)
    return out


# ------------------------------------------------------------------ generator


def _left(X: np.ndarray) -> np.ndarray:
    """``(n, N, N) -> (N, n*N)`` so that ``_left(X) @ Y.reshape(n*N, N) = sum_i X_i Y_i``."""
    n, N, _ = X.shape
    return np.ascontiguousarray(X.transpose(1, 0, 2)).reshape(N, n * N)


class TCL2Generator:
    """Superoperator (row-major ``vec``) of the TCL2 master equation."""

    def __init__(self, ops: SystemOperators, engine: RateEngine, lamb_shift: bool = True):
        self.ops = ops
        self.engine = engine
        self.lamb_shift = lamb_shift
        tables = engine.tables
        N = ops.n_sites
        S = np.array([ops.to_eigen(A) for A in ops.operators(tables.op_kind)]).reshape(-1, N, N)
        self.S = S
        self._S_left = _left(S)
        self._S_stack = S.reshape(-1, N)
        E = ops.energies
        self.coherent = -1j * (E[:, None] - E[None, :])
        # M_{i,f} = sum_j c^{ij}_f S_j, and the conjugate set for the Hermitian part
        acc: dict[tuple[int, int, int], np.ndarray] = {}
        for (i, j), cf in tables.coeffs.items():
            for f, c in cf.items():
                key = (i, f, 0)
                acc[key] = acc.get(key, 0) + c * S[j]
                if not lamb_shift:
                    key = (j, f, 1)
                    acc[key] = acc.get(key, 0) + np.conj(c) * S[i]
        keys = sorted(acc)
        self.i_idx = np.array([k[0] for k in keys], dtype=int)
        self.f_idx = np.array([k[1] for k in keys], dtype=int)
        self.conj = np.array([k[2] for k in keys], dtype=bool)
        self.M = np.array([acc[k] for k in keys]).reshape(len(keys), N, N)
        self._cache: dict[int, np.ndarray] = {}
        self._terms: dict[int, tuple] = {}

    @property
    def n_sites(self) -> int:
        return self.ops.n_sites

    def xi(self, G: np.ndarray) -> np.ndarray:
        """``Xi_i`` (eigenbasis) from rate values ``G[f, u]``."""
        N = self.n_sites
        out = np.zeros((self.S.shape[0], N, N), dtype=complex)
        if self.M.shape[0] == 0:
            return out
        Gab = G[self.f_idx][:, self.ops.bohr_index]
        Gab = np.where(self.conj[:, None, None], np.conj(Gab), Gab)
        X = Gab * self.M
        if not self.lamb_shift:
            X = 0.5 * X
        np.add.at(out, self.i_idx, X)
        return out

    def superoperator_from_xi(self, Xi: np.ndarray) -> np.ndarray:
        N = self.n_sites
        S = self.S
        n = S.shape[0]
        L = np.diag(self.coherent.ravel()).astype(complex)
        if n == 0:
            return L
        I = np.eye(N)
        A = np.einsum("iab,ibc->ac", S, Xi)
        Bm = np.einsum("iba,ibc->ac", Xi.conj(), S)
        P1 = (Xi.reshape(n, N * N).T @ S.transpose(0, 2, 1).reshape(n, N * N)).reshape(N, N, N, N)
        P2 = (S.reshape(n, N * N).T @ Xi.conj().reshape(n, N * N)).reshape(N, N, N, N)
        P = (P1 + P2).transpose(0, 2, 1, 3).reshape(N * N, N * N)
        return L - np.kron(A, I) - np.kron(I, Bm.T) + P

    def apply_xi(self, Xi: np.ndarray, rho: np.ndarray) -> np.ndarray:
        """``drho/dt`` for an eigenbasis ``rho`` without forming the superoperator."""
        out = self.coherent * rho
        n = self.S.shape[0]
        if n == 0:
            return out
        N = self.n_sites
        # every sum over i is one GEMM on the stacked (n*N, N) layout
        Xd = np.conj(np.transpose(Xi, (0, 2, 1)))
        A = self._S_left @ Xi.reshape(n * N, N)
        Bm = _left(Xd) @ self._S_stack
        mid = _left((Xi.reshape(n * N, N) @ rho).reshape(n, N, N)) @ self._S_stack
        mid += _left((self._S_stack @ rho).reshape(n, N, N)) @ Xd.reshape(n * N, N)
        return out - A @ rho - rho @ Bm + mid

    def refresh_terms(self, j: int) -> tuple:
        """Memoized ``(A, B, Xi_left, Xi^dagger_stack)`` at the ``j``-th refresh point."""
        if j not in self._terms:
            if len(self._terms) > 4:
                self._terms.pop(min(self._terms))
            Xi = self.xi(self.engine.at_refresh(j))
            n, N = Xi.shape[0], self.n_sites
            Xd = np.conj(np.transpose(Xi, (0, 2, 1)))
            self._terms[j] = (self._S_left @ Xi.reshape(n * N, N), _left(Xd) @ self._S_stack,
                             _left(Xi), Xd.reshape(n * N, N))
        return self._terms[j]

    def apply_terms(self, ta: tuple, tb: tuple, th: float, rho: np.ndarray) -> np.ndarray:
        """``apply_xi`` for ``Xi = (1 - th) Xi_a + th Xi_b`` from two ``refresh_terms``."""
        n, N = self.S.shape[0], self.n_sites
        A = (1 - th) * ta[0] + th * tb[0]
        Bm = (1 - th) * ta[1] + th * tb[1]
        r_s = (rho @ self._S_left).reshape(N, n, N).transpose(1, 0, 2).reshape(n * N, N)
        s_r = (self._S_stack @ rho).reshape(n, N, N).transpose(1, 0, 2).reshape(N, n * N)
        mid = ((1 - th) * ta[2] + th * tb[2]) @ r_s + s_r @ ((1 - th) * ta[3] + th * tb[3])
        return self.coherent * rho - A @ rho - rho @ Bm + mid

    def xi_at(self, t: float) -> np.ndarray:
        return self.xi(self.engine(t))

    def superoperator(self, t: float) -> np.ndarray:
        return self.superoperator_from_xi(self.xi_at(t))

    def refresh_superoperator(self, j: int) -> np.ndarray:
        """Memoized superoperator at the ``j``-th refresh point."""
        if j not in self._cache:
            if len(self._cache) > 4:
                self._cache.pop(min(self._cache))
            self._cache[j] = self.superoperator_from_xi(self.xi(self.engine.at_refresh(j)))
        return self._cache[j]

    def __call__(self, t: float, rho: np.ndarray) -> np.ndarray:
        return self.apply_xi(self.xi_at(t), rho)


def tcl2_generator(ops: SystemOperators, engine: RateEngine, t: float, lamb_shift: bool = True) -> np.ndarray:
    """Dense TCL2 superoperator at time ``t`` in the eigenbasis of ``H0``."""
    return TCL2Generator(ops, engine, lamb_shift).superoperator(t)


# ----------------------------------------------------------------- trajectory


@dataclass(eq=False)
class Trajectory:
    """Site-basis density matrices on an output grid."""

    times: np.ndarray
    states: np.ndarray
    frame: str
    metadata: dict = field(default_factory=dict)

    @property
    def populations(self) -> np.ndarray:
        return np.real(np.einsum("tii->ti", self.states))

    @property
    def trace_drift(self) -> float:
        return float(np.abs(np.einsum("tii->t", self.states) - 1).max())

    @property
    def min_population(self) -> float:
        return float(self.populations.min())

    def positivity_violation(self) -> float:
        """Most negative population below ``-POPULATION_SLACK`` (0 if none)."""
        return float(max(0.0, -self.min_population - POPULATION_SLACK))


def _settings_hash(settings: dict) -> str:
    return hashlib.sha256(json.dumps(settings, sort_keys=True, default=str).encode()).hexdigest()[:16]


def site_state(n_sites: int, site: int) -> np.ndarray:
    rho = np.zeros((n_sites, n_sites), dtype=complex)
    rho[site, site] = 1.0
    return rho


def eigenstate(H: np.ndarray | RenormalizedHamiltonian, index: int | None = None, site: int | None = None) -> np.ndarray:
    """Projector on an eigenstate of ``H``: by energy ``index`` or by largest weight on ``site``."""
    Hm = H.matrix() if isinstance(H, RenormalizedHamiltonian) else np.asarray(H)
    _, U = linalg.eigh(Hm)
    if (index is None) == (site is None):
        raise ValueError("give exactly one of index or site")
    k = index if index is not None else int(np.argmax(np.abs(U[site]) ** 2))
    v = U[:, k]
    return np.outer(v, v.conj())


def _check_state(rho0, n):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.shape != (n, n):
        raise ValueError(f"initial state must be {n}x{n}")
    if np.abs(rho0 - rho0.conj().T).max() > 1e-10:
        raise ValueError("initial state is not Hermitian")
    if abs(np.trace(rho0) - 1) > 1e-10:
        raise ValueError("initial state must have unit trace")
    if linalg.eigvalsh(rho0).min() < -1e-10:
        raise ValueError("initial state is not positive semidefinite")
    return rho0


def _check_grid(t_grid):
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 1 or t[0] != 0 or np.any(np.diff(t) <= 0):
        raise ValueError("time grid must start at 0 and increase strictly")
    return t


class _Recorder:
    def __init__(self, n_t, N):
        self.states = np.empty((n_t, N, N), dtype=complex)
        self.herm = 0.0
        self.trace = 0.0

    def store(self, k, rho, t):
        rho = rho.reshape(self.states.shape[1:])
        h = float(np.abs(rho - rho.conj().T).max())
        self.herm = max(self.herm, h)
        rho = 0.5 * (rho + rho.conj().T)
        drift = abs(np.trace(rho) - 1)
        self.trace = max(self.trace, drift)
        if drift > TRACE_ABORT:
            raise PropagationError(f"trace drift {drift:.3e} at t = {t:.4g} ps", {"t": t, "trace_drift": drift})
        self.states[k] = rho
        return rho


def _expm_segments(L, rho, times, start, rec, k0):
    """Constant-generator propagation through output times ``times[k0:]`` from ``start``."""
    N = rec.states.shape[1]
    cache: dict[float, np.ndarray] = {}
    use_dense = L.shape[0] <= 1600
    t_prev = start
    for k in range(k0, times.size):
        d = times[k] - t_prev
        if d > 0:
            if use_dense:
                key = round(d, 12)
                if key not in cache:
                    cache[key] = linalg.expm(L * d)
                rho = (cache[key] @ rho.ravel()).reshape(N, N)
            else:
                rho = expm_multiply(L * d, rho.ravel()).reshape(N, N)
        rho = rec.store(k, rho, times[k])
        t_prev = times[k]
    return rho


def propagate(
    rho0: np.ndarray,
    generator: TCL2Generator,
    t_grid,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    method: str = "DOP853",
    superoperator: bool | None = None,
) -> Trajectory:
    """Integrate the TCL2 equation from ``rho0`` (site basis) to every time in ``t_grid``.

    Rates are refreshed on the engine's refresh grid and interpolated
    linearly in between; each refresh interval is a separate adaptive
    Runge-Kutta solve.  After the memory time the generator is constant and
    the exact exponential is used.  States are re-symmetrized at output
    points; the largest pre-symmetrization anti-Hermitian part is recorded.
    """
    ops = generator.ops
    engine = generator.engine
    N = ops.n_sites
    times = _check_grid(t_grid)
    rho = ops.to_eigen(_check_state(rho0, N))
    if superoperator is None:
        superoperator = N <= 12
    rec = _Recorder(times.size, N)
    rho = rec.store(0, rho, 0.0)
    t_freeze = engine.t_freeze
    t_stop = min(times[-1], t_freeze)
    k = 1
    h = engine.refresh
    n_steps = 0
    t0 = 0.0
    while t0 < t_stop - 1e-12:
        j = engine.refresh_index(t0)
        t1 = min((j + 1) * h, t_stop)
        stop_k = k
        while stop_k < times.size and times[stop_k] <= t1 + 1e-12:
            stop_k += 1
        ta, tb = j * h, (j + 1) * h
        if superoperator:
            La = generator.refresh_superoperator(j)
            Lb = generator.refresh_superoperator(j + 1)

            def rhs(t, y, La=La, Lb=Lb):
                th = (t - ta) / (tb - ta)
                return (1 - th) * (La @ y) + th * (Lb @ y)

        else:
            if generator.S.shape[0] == 0:
                Ta = Tb = None
            else:
                Ta, Tb = generator.refresh_terms(j), generator.refresh_terms(j + 1)

            def rhs(t, y, Ta=Ta, Tb=Tb):
                rho = y.reshape(N, N)
                if Ta is None:
                    return (generator.coherent * rho).ravel()
                return generator.apply_terms(Ta, Tb, (t - ta) / (tb - ta), rho).ravel()

        t_eval = np.clip(times[k:stop_k], t0, t1)
        sol = integrate.solve_ivp(rhs, (t0, t1), rho.ravel(), method=method, rtol=rtol, atol=atol,
                                  t_eval=t_eval if t_eval.size else None)
        if sol.status != 0:
            raise PropagationError(f"integrator failed on [{t0:.4g}, {t1:.4g}] ps: {sol.message}",
                                   {"t": t0, "message": sol.message})
        n_steps += sol.nfev
        for q in range(t_eval.size):
            rec.store(k + q, sol.y[:, q], t_eval[q])
        k = stop_k
        rho = sol.y[:, -1].reshape(N, N)
        rho = 0.5 * (rho + rho.conj().T)
        t0 = t1
    if k < times.size:
        L = generator.superoperator(max(t_freeze, 0.0) if np.isfinite(t_freeze) else times[-1])
        rho = _expm_segments(L, rho, times, t0, rec, k)
    states = np.array([ops.to_site(r) for r in rec.states])
    meta = {
        "frame": "variational",
        "rtol": rtol,
        "atol": atol,
        "method": method,
        "refresh": h,
        "dt": engine.dt,
        "markov": engine.markov,
        "lamb_shift": generator.lamb_shift,
        "t_memory": engine.t_memory,
        "n_rhs": int(n_steps),
        "hermiticity_drift": rec.herm,
        "trace_drift": rec.trace,
    }
    meta["settings_hash"] = _settings_hash({k2: meta[k2] for k2 in ("rtol", "atol", "method", "refresh", "dt", "markov", "lamb_shift")})
    if rec.herm > 1e-7:
        log.warning("pre-symmetrization Hermiticity drift %.3e", rec.herm)
    traj = Trajectory(times, states, "variational", meta)
    viol = traj.positivity_violation()
    meta["positivity_violation"] = viol
    if viol > 0:
        log.warning("populations below -%g by %.3e (TCL2 is not completely positive)", POPULATION_SLACK, viol)
    return traj


def variational_dynamics(
    net: Network,
    baths: Sequence[SpectralDensity],
    beta: float,
    rho0: np.ndarray,
    t_grid,
    solution: VariationalSolution | None = None,
    p: int | None = None,
    markov: bool = False,
    lamb_shift: bool = True,
    refresh: float | None = None,
    dt: float | None = None,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    coupling_cutoff: float = 0.0,
) -> Trajectory:
    """Optimize (unless ``solution`` is given), assemble rates and propagate."""
    times = _check_grid(t_grid)
    if solution is None:
        solution = solve_self_consistent(net, baths, beta, p=p)
    ops = build_system_operators(solution.hamiltonian(net))
    tables = assemble_correlation_tables(solution, baths, net, coupling_cutoff=coupling_cutoff)
    if refresh is None:
        spacing = float(np.min(np.diff(times))) if times.size > 1 else 0.005
        refresh = min(spacing, 0.005)
    engine = RateEngine(tables, baths, beta, ops.bohr, times[-1], refresh=refresh, dt=dt, markov=markov)
    gen = TCL2Generator(ops, engine, lamb_shift=lamb_shift)
    traj = propagate(rho0, gen, times, rtol=rtol, atol=atol)
    traj.metadata.update({
        "solver": solution.mode,
        "optimizer_converged": bool(solution.converged),
        "renormalization": solution.B.tolist(),
        "diverged": np.asarray(solution.diverged).tolist(),
        "n_ops": int(gen.S.shape[0]),
        "n_basis": len(tables.basis),
    })
    traj.metadata["solution"] = solution
    return traj


def polaron_limit_propagate(net: Network, baths: Sequence[SpectralDensity], beta: float, rho0, t_grid, **kw) -> Trajectory:
    """TCL2 in the full polaron frame (``F = 1``).

    With a divergent renormalization integral (Ohmic baths) ``B = 0``: the
    coherent couplings vanish and transfer is purely incoherent hopping.
    """
    sol = fixed_solution(net, baths, beta, "polaron")
    if np.any(sol.diverged):
        log.warning("polaron frame: renormalization vanishes on sites %s", np.nonzero(sol.diverged)[0].tolist())
    return variational_dynamics(net, baths, beta, rho0, t_grid, solution=sol, **kw)


# --------------------------------------------------------- Redfield baseline


def redfield_generator(H0: np.ndarray, baths: Sequence[SpectralDensity], beta: float):
    """Bloch-Redfield superoperator (eigenbasis, row-major) without Lamb shifts.

    Each site couples through its projector ``A_n = |n><n|`` with Markov rate
    ``k_n(w) = pi S_n(-w)`` and the weak-coupling spectrum ``S_n``.  Returns
    ``(L, energies, vectors)``.
    """
    H0 = np.asarray(H0, dtype=float)
    N = H0.shape[0]
    if len(baths) != N:
        raise ValueError("one spectral density per site required")
    E, U = linalg.eigh(H0)
    W = E[:, None] - E[None, :]
    I = np.eye(N)
    R = np.zeros((N, N, N, N), dtype=complex)
    for n in range(N):
        A = np.outer(U[n].conj(), U[n])  # (U^dag |n><n| U)_ab
        k = np.pi * spectrum_zz(baths[n], np.inf, beta, -W.ravel()).reshape(N, N).real
        Ak = A * k  # Xi_ab = A_ab k(w_ab)
        # R_abcd = -d_bd sum_e A_ae Xi_ec + Xi_ac A_db + A_ac conj(Xi_bd) - d_ac sum_e conj(Xi_ed) A_eb
        R -= np.einsum("ac,bd->abcd", A @ Ak, I)
        R += np.einsum("ac,db->abcd", Ak, A)
        R += np.einsum("ac,bd->abcd", A, Ak.conj())
        R -= np.einsum("ac,db->abcd", I, Ak.conj().T @ A)
    L = R.reshape(N * N, N * N) + np.diag(-1j * W.ravel())
    return L, E, U


def bloch_redfield_propagate(net: Network, baths: Sequence[SpectralDensity], beta: float, rho0, t_grid) -> Trajectory:
    """Weak-coupling Bloch-Redfield dynamics on the bare Hamiltonian."""
    times = _check_grid(t_grid)
    N = net.n_sites
    rho0 = _check_state(rho0, N)
    L, E, U = redfield_generator(net.hamiltonian(), baths, beta)
    rec = _Recorder(times.size, N)
    rho = rec.store(0, U.conj().T @ rho0 @ U, 0.0)
    _expm_segments(L, rho, times, 0.0, rec, 1)
    states = np.array([U @ r @ U.conj().T for r in rec.states])
    meta = {"frame": "untransformed", "solver": "bloch-redfield", "lamb_shift": False, "markov": True,
            "trace_drift": rec.trace, "hermiticity_drift": rec.herm}
    meta["settings_hash"] = _settings_hash({"solver": "bloch-redfield"})
    return Trajectory(times, states, "untransformed", meta)

"""Variational displacement parameters and their self-consistent optimization.

For each site the displaced-oscillator amplitudes are ``f = F(w) g`` with

    F(w) = w / (w + alpha coth(beta w / 2)),

which fixes the bath renormalization ``B`` and the reorganization shift
``R``.  The parameters ``alpha`` follow from minimizing the free-energy bound
of the renormalized system Hamiltonian, either over the whole network
(:func:`solve_global_oracle`) or over small partitions of strongly coupled
sites (:func:`solve_self_consistent`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy import optimize

from .network import Network
from .spectral import FrequencyGrid, SpectralDensity, integrate_density

__all__ = [
    "displacement_function",
    "renorm_factor",
    "reorg_shift",
    "bath_divergent",
    "BathGroups",
    "VariationalSolution",
    "RenormalizedHamiltonian",
    "renormalized_hamiltonian",
    "select_partition",
    "partition_table",
    "connection_error",
    "gibbs_state",
    "alpha_update",
    "solve_self_consistent",
    "solve_global_oracle",
    "convergence_scan",
    "fixed_solution",
]

log = logging.getLogger(__name__)

_ATOL = 1e-12


def _coth_half(omega, beta):
    """coth(beta w / 2), equal to 1 at zero temperature."""
    if np.isinf(beta):
        return np.ones_like(omega)
    return 1.0 / np.tanh(0.5 * beta * omega)


def displacement_function(omega, alpha, beta):
    """Variational displacement ``F(w) = w / (w + alpha coth(beta w/2))``.

    Broadcasts over ``omega`` and ``alpha``.  ``alpha = inf`` gives the
    undisplaced frame (``F = 0``); at ``w = 0`` the limit is 0 for positive
    ``alpha`` and 1 for ``alpha = 0``.
    """
    omega = np.asarray(omega, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(omega < 0):
        raise ValueError("displacement function needs omega >= 0")
    if np.any(alpha < 0):
        raise ValueError("alpha must be non-negative")
    # w tanh(bw/2) / (w tanh(bw/2) + alpha) avoids the coth pole at w = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.ones_like(omega) if np.isinf(beta) else np.tanh(0.5 * beta * omega)
        wt = omega * t
        F = wt / (wt + alpha)
    out = np.where(np.isinf(alpha), 0.0, F)
    out = np.where((wt == 0) & (alpha == 0), 1.0, out)
    out = np.where((wt == 0) & (alpha > 0), 0.0, out)
    return out if out.ndim else float(out)


def bath_divergent(sd: SpectralDensity, beta: float) -> bool:
    """True when the full-polaron (F = 1) renormalization integral diverges."""
    s = sd.low_frequency_exponent
    return s <= 1.0 if np.isinf(beta) else s <= 2.0


def _b_integrand(omega, alpha, beta):
    F = displacement_function(omega, alpha, beta)
    return F**2 * _coth_half(omega, beta) / omega**2


def _r_integrand(omega, alpha, beta):
    F = displacement_function(omega, alpha, beta)
    return F * (F - 2.0) / omega


def renorm_factor(sd: SpectralDensity, alpha: float, beta: float, rtol: float = 1e-10, with_flag: bool = False):
    """Bath renormalization ``B = exp(-1/2 int J F^2 coth(bw/2) / w^2)``.

    Adaptive quadrature; returns 0 (and ``diverged=True`` if ``with_flag``)
    when ``alpha = 0`` and the integral diverges at low frequency.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if np.isinf(alpha):
        return (1.0, False) if with_flag else 1.0
    if alpha == 0 and bath_divergent(sd, beta):
        return (0.0, True) if with_flag else 0.0
    val = integrate_density(sd, lambda w: float(_b_integrand(w, alpha, beta)), rtol=rtol)
    B = float(np.exp(-0.5 * val))
    return (B, False) if with_flag else B


def reorg_shift(sd: SpectralDensity, alpha: float, beta: float, rtol: float = 1e-10) -> float:
    """Reorganization shift ``R = int J F (F - 2) / w`` (non-positive)."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if np.isinf(alpha):
        return 0.0
    if alpha == 0:
        return -sd.reorganization_energy()
    return float(integrate_density(sd, lambda w: float(_r_integrand(w, alpha, beta)), rtol=rtol))


class BathGroups:
    """Vectorized ``B`` and ``R`` for many sites sharing a few distinct baths.

    Sites whose bath objects are equal share one :class:`FrequencyGrid`.
    """

    def __init__(self, baths: Sequence[SpectralDensity], beta: float, order: int = 16):
        self.beta = beta
        self.n_sites = len(baths)
        self.groups: list[tuple[np.ndarray, SpectralDensity, FrequencyGrid, np.ndarray]] = []
        keys: list[SpectralDensity] = []
        members: list[list[int]] = []
        for n, sd in enumerate(baths):
            for k, key in enumerate(keys):
                if key is sd or key == sd:
                    members[k].append(n)
                    break
            else:
                keys.append(sd)
                members.append([n])
        for sd, idx in zip(keys, members):
            grid = FrequencyGrid.for_density(sd, order=order)
            J = sd(grid.nodes)
            self.groups.append((np.asarray(idx), sd, grid, J))
        self.reorg = np.empty(self.n_sites)
        self.divergent = np.zeros(self.n_sites, dtype=bool)
        for idx, sd, _, _ in self.groups:
            self.reorg[idx] = sd.reorganization_energy()
            self.divergent[idx] = bath_divergent(sd, beta)

    def evaluate(self, alpha: np.ndarray):
        """Return ``(B, R, diverged)`` for the per-site ``alpha`` vector."""
        alpha = np.asarray(alpha, dtype=float)
        B = np.ones(self.n_sites)
        R = np.zeros(self.n_sites)
        diverged = np.zeros(self.n_sites, dtype=bool)
        for idx, _, grid, J in self.groups:
            a = alpha[idx]
            w = grid.nodes
            finite = np.isfinite(a)
            zero = finite & (a == 0)
            regular = finite & ~zero
            if np.any(regular):
                F = displacement_function(w[None, :], a[regular, None], self.beta)
                coth = _coth_half(w, self.beta)
                b_int = grid.integrate(J * F**2 * coth / w**2)
                r_int = grid.integrate(J * F * (F - 2.0) / w)
                B[idx[regular]] = np.exp(-0.5 * b_int)
                R[idx[regular]] = r_int
            if np.any(zero):
                zi = idx[zero]
                R[zi] = -self.reorg[zi]
                div = self.divergent[zi]
                diverged[zi] = div
                if np.any(~div):
                    coth = _coth_half(w, self.beta)
                    B[zi[~div]] = np.exp(-0.5 * grid.integrate(J * coth / w**2))
                B[zi[div]] = 0.0
        return B, R, diverged


@dataclass(frozen=True, eq=False)
class RenormalizedHamiltonian:
    """``E~_n = E_n + R_n`` and ``V~_nm = B_n B_m V_nm`` (rad/ps)."""

    energies: np.ndarray
    couplings: np.ndarray

    def matrix(self) -> np.ndarray:
        return np.diag(self.energies) + self.couplings

    def restrict(self, sites) -> "RenormalizedHamiltonian":
        sites = np.asarray(sites)
        return RenormalizedHamiltonian(self.energies[sites], self.couplings[np.ix_(sites, sites)])

    @property
    def n_sites(self) -> int:
        return self.energies.size


@dataclass(eq=False)
class VariationalSolution:
    """Per-site variational parameters and solver diagnostics (rad/ps)."""

    alpha: np.ndarray
    B: np.ndarray
    R: np.ndarray
    partitions: np.ndarray
    iterations: int
    residual: float
    converged: bool
    beta: float
    p: int
    clamped: np.ndarray = None
    diverged: np.ndarray = None
    history: list = field(default_factory=list)
    mode: str = "variational"

    def __post_init__(self):
        n = self.alpha.size
        if self.clamped is None:
            self.clamped = np.zeros(n, dtype=bool)
        if self.diverged is None:
            self.diverged = np.zeros(n, dtype=bool)

    @property
    def n_sites(self) -> int:
        return self.alpha.size

    def hamiltonian(self, net: Network) -> RenormalizedHamiltonian:
        return renormalized_hamiltonian(net, self)

    def permuted(self, perm) -> "VariationalSolution":
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        parts = inv[self.partitions[perm]] if self.partitions.size else self.partitions
        return VariationalSolution(
            self.alpha[perm], self.B[perm], self.R[perm], parts, self.iterations, self.residual,
            self.converged, self.beta, self.p, self.clamped[perm], self.diverged[perm], list(self.history), self.mode,
        )


def renormalized_hamiltonian(net: Network, sol: VariationalSolution) -> RenormalizedHamiltonian:
    return RenormalizedHamiltonian(net.energies + sol.R, np.outer(sol.B, sol.B) * net.couplings)


def select_partition(net: Network, i: int, p: int) -> np.ndarray:
    """Site ``i`` followed by the ``p-1`` sites with largest bare ``|V_ij|``.

    Ties go to the lowest site index.
    """
    n = net.n_sites
    if not 1 <= p <= n:
        raise ValueError(f"partition size {p} outside [1, {n}]")
    row = np.abs(net.couplings[i]).copy()
    others = np.delete(np.arange(n), i)
    order = np.argsort(-row[others], kind="stable")
    return np.concatenate([[i], others[order[: p - 1]]]).astype(int)


def partition_table(net: Network, p: int) -> np.ndarray:
    """``(N, p)`` array whose row ``i`` is :func:`select_partition` for site ``i``."""
    n = net.n_sites
    if not 1 <= p <= n:
        raise ValueError(f"partition size {p} outside [1, {n}]")
    absV = np.abs(net.couplings)
    # sort key: larger |V| first, then lower index; the site itself always first
    key = -absV
    np.fill_diagonal(key, -np.inf)
    order = np.argsort(key, axis=1, kind="stable")
    return order[:, :p].astype(int)


def _shifted_gibbs(H, beta):
    """Gibbs state of Hermitian ``H`` (batched over leading axes)."""
    e, U = np.linalg.eigh(H)
    e0 = e[..., :1]
    if np.isinf(beta):
        w = (e - e0 <= 1e-12 * np.maximum(1.0, np.abs(e0))).astype(float)
    else:
        w = np.exp(-beta * (e - e0))
    w /= w.sum(axis=-1, keepdims=True)
    rho = (U * w[..., None, :]) @ np.swapaxes(U.conj(), -1, -2)
    return rho, e, w


def gibbs_state(H: np.ndarray, beta: float) -> np.ndarray:
    """Normalized ``exp(-beta H)`` computed from a shifted eigendecomposition."""
    rho, _, _ = _shifted_gibbs(np.asarray(H), beta)
    return rho


def alpha_update(H_local: RenormalizedHamiltonian, n: int, beta: float, with_flag: bool = False):
    """Closed-form ``alpha_n = -(V~ rho)_nn / rho_nn`` on a local Hamiltonian.

    ``n`` indexes a site of ``H_local``.  Negative values are clamped to 0.
    """
    rho = gibbs_state(H_local.matrix(), beta)
    if not np.all(np.isfinite(rho)):
        raise FloatingPointError("non-finite Gibbs state")
    num = float(np.real(H_local.couplings[n] @ rho[:, n]))
    a = -num / float(np.real(rho[n, n]))
    clamped = a < 0
    a = max(a, 0.0)
    return (a, clamped) if with_flag else a


def _local_alphas(E_t, V_t, parts, beta):
    """Batched local update over all sites; partition row ``i`` starts with ``i``."""
    H = V_t[parts[:, :, None], parts[:, None, :]]
    idx = np.arange(parts.shape[1])
    H[:, idx, idx] = E_t[parts]
    rho, _, _ = _shifted_gibbs(H, beta)
    Vloc = H.copy()
    Vloc[:, idx, idx] = 0.0
    num = np.einsum("sj,sj->s", Vloc[:, 0, :], rho[:, :, 0])
    a = -num / rho[:, 0, 0]
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite local Gibbs state")
    return a


def _rel_change(new, old):
    new = np.asarray(new, dtype=float)
    old = np.asarray(old, dtype=float)
    scale = np.maximum(np.maximum(np.abs(new), np.abs(old)), _ATOL)
    d = np.abs(new - old) / scale
    d[(new == old)] = 0.0
    return d


def _initial_alpha(init, groups: BathGroups, net: Network):
    n = net.n_sites
    if isinstance(init, str):
        if init == "reorg":
            return groups.reorg.copy()
        if init == "zero":
            return np.zeros(n)
        if init == "weak":
            scale = max(np.abs(net.couplings).max(initial=0.0), groups.reorg.max(initial=0.0), 1.0)
            return np.full(n, 100.0 * scale)
        raise ValueError(f"unknown initialization {init!r}")
    a = np.asarray(init, dtype=float)
    if a.shape != (n,):
        raise ValueError("initial alpha must have one entry per site")
    return a.copy()


def fixed_solution(net: Network, baths: Sequence[SpectralDensity], beta: float, mode: str) -> VariationalSolution:
    """Frame with a forced displacement: ``'polaron'`` (F = 1) or ``'weak'`` (F = 0)."""
    n = net.n_sites
    groups = BathGroups(baths, beta)
    if mode == "polaron":
        alpha = np.zeros(n)
    elif mode == "weak":
        alpha = np.full(n, np.inf)
    else:
        raise ValueError(f"unknown fixed frame {mode!r}")
    B, R, div = groups.evaluate(alpha)
    return VariationalSolution(alpha, B, R, np.zeros((n, 0), int), 0, 0.0, True, beta, 0, diverged=div, mode=mode)


def solve_self_consistent(
    net: Network,
    baths: Sequence[SpectralDensity],
    beta: float,
    p: int | None = None,
    tol: float = 5e-4,
    max_iter: int = 500,
    damping: float = 0.5,
    init="reorg",
    groups: BathGroups | None = None,
) -> VariationalSolution:
    """Partitioned fixed-point solve for ``alpha``.

    Each sweep freezes ``(B, R)``, builds every site's ``p x p`` local
    renormalized Hamiltonian and applies the closed-form update, then mixes
    ``alpha <- (1 - eta) alpha + eta update``.  ``eta`` starts at ``damping``
    and halves whenever successive residual vectors point in opposite
    directions.  Convergence: the fixed-point residual and the sweep changes
    of ``alpha``, ``B`` and ``R`` all fall below ``tol`` (relative).
    """
    n = net.n_sites
    if len(baths) != n:
        raise ValueError("need one spectral density per site")
    p = n if p is None else p
    if not 1 <= p <= n:
        raise ValueError(f"partition size {p} outside [1, {n}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    groups = groups or BathGroups(baths, beta)
    parts = partition_table(net, p)
    alpha = _initial_alpha(init, groups, net)
    B, R, div = groups.evaluate(alpha)
    eta = damping
    prev_step = None
    history = []
    converged = False
    best = (np.inf, alpha, B, R, div)
    residual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        E_t = net.energies + R
        V_t = np.outer(B, B) * net.couplings
        raw = _local_alphas(E_t, V_t, parts, beta)
        target = np.maximum(raw, 0.0)
        step = target - alpha
        residual = float(_rel_change(target, alpha).max(initial=0.0))
        if prev_step is not None and float(step @ prev_step) < 0 and eta > 1.0 / 64:
            eta *= 0.5
        prev_step = step
        new_alpha = alpha + eta * step
        B_new, R_new, div = groups.evaluate(new_alpha)
        change = max(
            float(_rel_change(new_alpha, alpha).max(initial=0.0)),
            float(_rel_change(B_new, B).max(initial=0.0)),
            float(_rel_change(R_new, R).max(initial=0.0)),
        )
        alpha, B, R = new_alpha, B_new, R_new
        history.append((it, residual))
        if residual < best[0]:
            best = (residual, alpha, B, R, div)
        if residual < tol and change < tol:
            converged = True
            break
    if not converged:
        log.warning("variational solve did not converge in %d sweeps (residual %.3e)", max_iter, residual)
        residual, alpha, B, R, div = best
    E_t = net.energies + R
    V_t = np.outer(B, B) * net.couplings
    clamped = _local_alphas(E_t, V_t, parts, beta) < 0
    return VariationalSolution(
        alpha, B, R, parts, it, residual, converged, beta, p, clamped, div, history
    )


def solve_global_oracle(
    net: Network,
    baths: Sequence[SpectralDensity],
    beta: float,
    tol: float = 1e-12,
    max_nodes_order: int = 24,
    init="reorg",
) -> VariationalSolution:
    """Reference solve over the full network Gibbs state.

    Independent of the partitioned solver: Gibbs states by ``scipy.linalg.expm``,
    bath integrals on a higher-order rule, root finding by
    ``scipy.optimize.root`` on ``alpha - G(alpha)``.
    """
    n = net.n_sites
    if n > 64:
        raise ValueError("global oracle is limited to N <= 64")
    groups = BathGroups(baths, beta, order=max_nodes_order)
    V = net.couplings

    def update(alpha):
        B, R, _ = groups.evaluate(np.abs(alpha))
        Vt = np.outer(B, B) * V
        H = np.diag(net.energies + R) + Vt
        shift = np.linalg.eigvalsh(H)[0]
        X = sla.expm(-beta * (H - shift * np.eye(n)))
        rho = X / np.trace(X)
        out = -np.einsum("nj,jn->n", Vt, rho) / np.diag(rho)
        return np.maximum(out, 0.0)

    x0 = _initial_alpha(init, groups, net)
    sol = optimize.root(lambda a: a - update(a), x0, method="hybr", tol=tol)
    alpha = np.abs(sol.x)
    # polish with plain iteration so clamped components settle exactly
    for _ in range(3):
        alpha = update(alpha)
    B, R, div = groups.evaluate(alpha)
    resid = float(_rel_change(update(alpha), alpha).max(initial=0.0))
    return VariationalSolution(
        alpha, B, R, np.tile(np.arange(n), (n, 1)), int(sol.nfev), resid, bool(resid < max(tol, 1e-9) * 1e3),
        beta, n, diverged=div, mode="global",
    )


def connection_error(net: Network, solution: VariationalSolution, i: int, p: int) -> tuple[float, float]:
    """Second-order neglected coupling for site ``i``'s partition of size ``p``.

    Returns ``(sum_{n in A, m not in A} |V~_nm|^2, beta * that / Z_A)`` with
    ``Z_A`` the product of the shifted partition functions of the local and
    irrelevant blocks.
    """
    A = select_partition(net, i, p)
    mask = np.zeros(net.n_sites, dtype=bool)
    mask[A] = True
    Ht = renormalized_hamiltonian(net, solution)
    cut = Ht.couplings[np.ix_(mask, ~mask)]
    err = float(np.sum(np.abs(cut) ** 2))
    beta = solution.beta
    if err == 0.0 or np.isinf(beta):
        return err, (0.0 if err == 0.0 else np.inf)
    Z = 1.0
    H = Ht.matrix()
    for m in (mask, ~mask):
        if m.any():
            e = np.linalg.eigvalsh(H[np.ix_(m, m)])
            Z *= float(np.exp(-beta * (e - e[0])).sum())
    return err, beta * err / Z


def convergence_scan(
    net: Network,
    baths: Sequence[SpectralDensity],
    beta: float,
    p_range: Sequence[int],
    tol: float = 1e-10,
    max_iter: int = 2000,
) -> list[tuple[int, float]]:
    """``eps_p``: max relative change of ``{R_n, B_n}`` between sizes ``p-1`` and ``p``."""
    p_values = sorted(set(int(p) for p in p_range))
    if not p_values or p_values[0] < 1 or p_values[-1] > net.n_sites:
        raise ValueError("p_range must lie within [1, N]")
    groups = BathGroups(baths, beta)
    sols: dict[int, VariationalSolution] = {}
    init = "reorg"
    for p in range(max(1, p_values[0] - 1), p_values[-1] + 1):
        s = solve_self_consistent(net, baths, beta, p, tol=tol, max_iter=max_iter, init=init, groups=groups)
        sols[p] = s
        init = s.alpha
    out = []
    for p in p_values:
        if p - 1 not in sols:
            continue
        a, b = sols[p - 1], sols[p]
        eps = max(float(_rel_change(b.R, a.R).max()), float(_rel_change(b.B, a.B).max()))
        out.append((p, eps))
    return out

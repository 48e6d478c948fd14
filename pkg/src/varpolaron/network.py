"""Exciton networks: site energies, couplings, geometry builders and presets.

A :class:`Network` stores energies and couplings in internal units (rad/ps);
use :meth:`Network.from_cm` and :attr:`Network.energies_cm` at I/O boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import AdolphsRenger, SpectralDensity, SuperOhmic, combine, load_mode_file
from .units import CM_TO_RADPS, EV_TO_CM, cm, to_cm

__all__ = [
    "Network",
    "DipoleGeometry",
    "HelixParams",
    "dipole_coupling",
    "coupling_matrix",
    "build_helix",
    "helix_geometry",
    "preset_network",
    "Preset",
    "FMO_H0_CM",
    "PRESETS",
]

DATA_DIR = Path(__file__).resolve().parent / "data"


@dataclass(frozen=True, eq=False)
class Network:
    """Site energies ``E_n`` and symmetric couplings ``V_nm`` (rad/ps)."""

    energies: np.ndarray
    couplings: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        E = np.array(self.energies, dtype=float).reshape(-1)
        V = np.array(self.couplings, dtype=float)
        n = E.size
        if n < 1:
            raise ValueError("a network needs at least one site")
        if V.shape != (n, n):
            raise ValueError(f"coupling matrix has shape {V.shape}, expected {(n, n)}")
        if not (np.all(np.isfinite(E)) and np.all(np.isfinite(V))):
            raise ValueError("non-finite energy or coupling")
        if np.any(np.diag(V) != 0):
            raise ValueError("coupling matrix diagonal must be exactly zero")
        asym = np.abs(V - V.T)
        if asym.max() > 0:
            i, j = np.unravel_index(np.argmax(asym), asym.shape)
            raise ValueError(
                f"coupling matrix not symmetric: V[{i},{j}]={to_cm(V[i, j]):.6g} cm^-1 "
                f"vs V[{j},{i}]={to_cm(V[j, i]):.6g} cm^-1"
            )
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels must have one entry per site")
        E.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "energies", E)
        object.__setattr__(self, "couplings", V)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @classmethod
    def from_cm(cls, energies, couplings, labels=None) -> "Network":
        return cls(cm(np.asarray(energies, float)), cm(np.asarray(couplings, float)), labels)

    @classmethod
    def from_hamiltonian_cm(cls, H, labels=None) -> "Network":
        """Split a full Hamiltonian matrix (cm^-1) into energies and couplings."""
        H = np.asarray(H, dtype=float)
        V = H - np.diag(np.diag(H))
        return cls.from_cm(np.diag(H), V, labels)

    @property
    def n_sites(self) -> int:
        return self.energies.size

    @property
    def energies_cm(self) -> np.ndarray:
        return to_cm(self.energies)

    @property
    def couplings_cm(self) -> np.ndarray:
        return to_cm(self.couplings)

    def hamiltonian(self) -> np.ndarray:
        return np.diag(self.energies) + self.couplings

    def scaled(self, coupling_factor: float) -> "Network":
        return Network(self.energies, coupling_factor * self.couplings, self.labels)

    def permuted(self, perm) -> "Network":
        perm = np.asarray(perm)
        labels = None if self.labels is None else tuple(self.labels[k] for k in perm)
        return Network(self.energies[perm], self.couplings[np.ix_(perm, perm)], labels)

    def site_index(self, key) -> int:
        """Resolve a 0-based integer or a label to a site index."""
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < self.n_sites:
                raise IndexError(f"site {key} out of range for {self.n_sites} sites")
            return int(key)
        if self.labels is not None and key in self.labels:
            return self.labels.index(key)
        raise KeyError(f"unknown site {key!r}")


@dataclass(frozen=True, eq=False)
class DipoleGeometry:
    """Point dipoles at ``positions`` (nm) with unit orientations ``dipoles``.

    ``dipole_norm`` is the coupling (internal units) between parallel dipoles
    perpendicular to a 1 nm separation.
    """

    positions: np.ndarray
    dipoles: np.ndarray
    dipole_norm: float

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float)
        d = np.array(self.dipoles, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3 or d.shape != pos.shape:
            raise ValueError("positions and dipoles must both be (N, 3) arrays")
        if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-12):
            raise ValueError("dipole orientations must be unit vectors")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "dipoles", d)

    @property
    def n_sites(self) -> int:
        return self.positions.shape[0]


def dipole_coupling(geom: DipoleGeometry, n: int, m: int) -> float:
    """Point-dipole coupling between sites ``n`` and ``m``."""
    if n == m:
        raise ValueError("dipole coupling needs two distinct sites")
    # order-independent arithmetic so that V_nm == V_mn bit for bit
    a, b = (n, m) if n < m else (m, n)
    r = geom.positions[b] - geom.positions[a]
    dist = float(np.sqrt(r @ r))
    if dist == 0.0:
        raise ZeroDivisionError(f"sites {n} and {m} coincide")
    rhat = r / dist
    da, db = geom.dipoles[a], geom.dipoles[b]
    kappa = da @ db - 3.0 * (da @ rhat) * (db @ rhat)
    return float(geom.dipole_norm * kappa / dist**3)


def coupling_matrix(geom: DipoleGeometry) -> np.ndarray:
    """Vectorized dipole-dipole coupling matrix (zero diagonal)."""
    pos, d = geom.positions, geom.dipoles
    r = pos[None, :, :] - pos[:, None, :]
    dist = np.linalg.norm(r, axis=-1)
    n = pos.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0):
        raise ZeroDivisionError("coincident dipole positions")
    np.fill_diagonal(dist, 1.0)
    rhat = r / dist[..., None]
    kappa = d @ d.T - 3.0 * np.einsum("nmk,nk->nm", rhat, d) * np.einsum("nmk,mk->nm", rhat, d)
    V = geom.dipole_norm * kappa / dist**3
    np.fill_diagonal(V, 0.0)
    return 0.5 * (V + V.T)


@dataclass(frozen=True)
class HelixParams:
    """Triplet helix: site ``3i+j`` sits at ``(r cos(i theta), i v + j s, r sin(i theta))``.

    Lengths in nm; ``eps`` and ``delta`` in internal energy units.
    """

    theta: float = 0.6
    r: float = 4.0
    v: float = 1.0
    s: float = 0.8
    n_triplets: int = 34
    eps: float = cm(2.0 * EV_TO_CM)
    delta: float = cm(0.005 * EV_TO_CM)

    def __post_init__(self):
        if self.n_triplets < 1:
            raise ValueError("n_triplets must be >= 1")
        if self.r <= 0:
            raise ValueError("helix radius must be positive")


def helix_geometry(p: HelixParams, dipole_norm: float) -> DipoleGeometry:
    i = np.repeat(np.arange(p.n_triplets), 3)
    j = np.tile(np.arange(3), p.n_triplets)
    ang = i * p.theta
    pos = np.stack([p.r * np.cos(ang), i * p.v + j * p.s, p.r * np.sin(ang)], axis=1)
    # tangent of the spiral path traced by the triplet index
    tan = np.stack([-p.r * p.theta * np.sin(ang), np.full_like(ang, p.v), p.r * p.theta * np.cos(ang)], axis=1)
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return DipoleGeometry(pos, tan, dipole_norm)


def intra_triplet_factor(p: HelixParams) -> float:
    """Coupling between neighbouring sites of a triplet per unit ``dipole_norm``."""
    g = helix_geometry(HelixParams(p.theta, p.r, p.v, p.s, 1, p.eps, p.delta), 1.0)
    return dipole_coupling(g, 0, 1)


def build_helix(p: HelixParams, dipole_norm: float | None = None, nn_coupling: float | None = cm(350.0)) -> Network:
    """Helix network.

    Either ``dipole_norm`` fixes the 1 nm reference coupling directly, or
    ``nn_coupling`` fixes the intra-triplet nearest-neighbour coupling (the
    default, 350 cm^-1).  Passing ``dipole_norm`` overrides ``nn_coupling``.
    """
    if dipole_norm is None:
        if nn_coupling is None:
            raise ValueError("give dipole_norm or nn_coupling")
        dipole_norm = nn_coupling / intra_triplet_factor(p)
    geom = helix_geometry(p, dipole_norm)
    n = 3 * p.n_triplets
    E = p.eps + p.delta * (np.arange(n) // 3)
    return Network(E, coupling_matrix(geom))


FMO_H0_CM = np.array(
    [
        [240, -87.7, 5.5, -5.9, 6.7, -13.7, -9.9],
        [-87.7, 315, 30.8, 8.2, 0.7, 11.8, 4.3],
        [5.5, 30.8, 0, -53.5, -2.2, -9.6, 6.0],
        [-5.9, 8.2, -53.5, 130, -70.7, -17.0, -63.3],
        [6.7, 0.7, -2.2, -70.7, 285, 81.1, -1.3],
        [-13.7, 11.8, -9.6, -17.0, 81.1, 435, 39.7],
        [-9.9, 4.3, 6.0, -63.3, -1.3, 39.7, 245],
    ]
)


def _lh2(
    nearest_neighbor_only: bool = False,
    r_b850: float = 2.6,
    r_b800: float = 3.1,
    dz_b800: float = 1.7,
    dipole_norm: float = cm(187.0),
) -> Network:
    """24-site LH2 ring: 8 repeats of (B800, aB850, bB850).

    Stated couplings are imposed exactly; all other pairs come from point
    dipoles on an idealized ring unless ``nearest_neighbor_only``.
    """
    k = 8
    labels = []
    for u in range(k):
        labels += [f"B800_{u}", f"aB850_{u}", f"bB850_{u}"]
    idx = {lab: n for n, lab in enumerate(labels)}
    n = 3 * k
    E = np.zeros(n)
    for u in range(k):
        E[idx[f"bB850_{u}"]] = cm(80.0)
    if nearest_neighbor_only:
        V = np.zeros((n, n))
    else:
        pos, dip = [], []
        for u in range(k):
            base = 2 * np.pi * u / k
            for ang, rad, z in (
                (base + np.pi / k, r_b800, dz_b800),
                (base, r_b850, 0.0),
                (base + np.pi / (2 * k), r_b850, 0.0),
            ):
                pos.append((rad * np.cos(ang), rad * np.sin(ang), z))
                dip.append((-np.sin(ang), np.cos(ang), 0.0))
        V = coupling_matrix(DipoleGeometry(np.array(pos), np.array(dip), dipole_norm))
    stated = []
    for u in range(k):
        w = (u + 1) % k
        stated += [
            (f"aB850_{u}", f"bB850_{u}", 408.0),
            (f"bB850_{u}", f"aB850_{w}", 366.0),
            (f"B800_{u}", f"aB850_{u}", 52.0),
            (f"B800_{u}", f"bB850_{u}", 40.0),
        ]
    for a, b, val in stated:
        V[idx[a], idx[b]] = V[idx[b], idx[a]] = cm(val)
    return Network(E, V, tuple(labels))


@dataclass(frozen=True)
class Preset:
    network: Network
    baths: tuple[SpectralDensity, ...]
    temperature: float
    notes: str = ""
    groups: dict = field(default_factory=dict)


def _fmo_baths(mode_file=None) -> tuple[SpectralDensity, ...]:
    background = AdolphsRenger(0.29, 0.8, 0.5, cm(0.056), cm(1.94))
    path = Path(mode_file) if mode_file is not None else DATA_DIR / "fmo_modes_placeholder.txt"
    modes = load_mode_file(path, cm(5.0), CM_TO_RADPS)
    sd = combine([background, modes]) if modes.modes else background
    return (sd,) * 7


def preset_network(name: str, mode_file=None, **kw) -> Preset:
    """Return one of the shipped networks with its per-site baths and default temperature (K).

    ``mode_file`` replaces the mode-comb data for ``fmo7`` and ``lh2``.
    Extra keywords are passed to the geometry builders.
    """
    if name == "fmo7":
        net = Network.from_hamiltonian_cm(FMO_H0_CM, tuple(str(k) for k in range(1, 8)))
        return Preset(net, _fmo_baths(mode_file), 300.0, "FMO monomer")
    if name == "lh2":
        net = _lh2(**kw)
        bg = SuperOhmic(cm(80.0), cm(100.0))
        sd = bg
        if mode_file is not None:
            modes = load_mode_file(mode_file, cm(11.0), CM_TO_RADPS)
            sd = combine([bg, modes]) if modes.modes else bg
        b800 = [n for n, lab in enumerate(net.labels) if lab.startswith("B800")]
        b850 = [n for n in range(net.n_sites) if n not in b800]
        return Preset(net, (sd,) * net.n_sites, 300.0, "LH2 double ring", {"B800": b800, "B850": b850})
    if name in ("helix102", "helix3000"):
        n_trip = 34 if name == "helix102" else 1000
        p = HelixParams(n_triplets=n_trip, **{k: kw.pop(k) for k in list(kw) if k in HelixParams.__dataclass_fields__})
        net = build_helix(p, **kw)
        sd = SuperOhmic(cm(180.0), cm(200.0))
        n = net.n_sites
        thirds = {f"third_{k + 1}": list(range(k * n // 3, (k + 1) * n // 3)) for k in range(3)}
        return Preset(net, (sd,) * n, 300.0, f"{n}-site helix", thirds)
    raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


PRESETS = ("fmo7", "lh2", "helix102", "helix3000")

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from varpolaron.network import (
    FMO_H0_CM,
    DipoleGeometry,
    HelixParams,
    Network,
    build_helix,
    coupling_matrix,
    dipole_coupling,
    helix_geometry,
    preset_network,
)
from varpolaron.spectral import (
    AdolphsRenger,
    DrudeLorentz,
    ModeComb,
    SuperOhmic,
    combine,
    eval_spectral_density,
    load_mode_file,
    reorganization_energy,
)
from varpolaron.units import CM_TO_RADPS, EV_TO_CM, cm, ev, kelvin_to_beta, to_cm


def test_unit_constant():
    # 2 pi c with c in cm/ps
    assert CM_TO_RADPS == pytest.approx(2 * math.pi * 2.99792458e10 * 1e-12, rel=1e-15)
    assert to_cm(cm(123.4)) == pytest.approx(123.4, rel=1e-15)
    assert kelvin_to_beta(0) == np.inf
    assert kelvin_to_beta(np.inf) == 0.0


def test_network_rejects_asymmetric_and_diagonal():
    with pytest.raises(ValueError, match="not symmetric"):
        Network([0, 1], [[0, 1], [1.001, 0]])
    with pytest.raises(ValueError, match="diagonal"):
        Network([0, 1], [[1, 0], [0, 0]])
    with pytest.raises(ValueError):
        Network([], np.zeros((0, 0)))


def test_super_ohmic_values():
    sd = SuperOhmic(cm(180), cm(200))
    assert eval_spectral_density(sd, 0.0) == 0.0
    assert to_cm(eval_spectral_density(sd, cm(200))) == pytest.approx(180 / math.e, rel=1e-12)
    with pytest.raises(ValueError):
        eval_spectral_density(sd, -1.0)


def test_adolphs_renger_direct_formula():
    S, s1, s2, w1, w2 = 0.29, 0.8, 0.5, 0.056, 1.94
    sd = AdolphsRenger(S, s1, s2, w1, w2)
    w = 1.0
    # scalar oracle written out term by term
    ref = 0.0
    for s, wi in ((s1, w1), (s2, w2)):
        ref += S / (s1 + s2) * s / (5040 * 2 * wi**4) * w**5 * math.exp(-math.sqrt(w / wi))
    assert eval_spectral_density(sd, w) == pytest.approx(ref, rel=1e-13)


def test_reorganization_super_ohmic_cubic_377():
    sd = SuperOhmic.from_lambda(0.628, cm(300))
    assert to_cm(reorganization_energy(sd)) == pytest.approx(377, abs=1)


def test_reorganization_drude_lorentz_quadrature_oracle():
    lam, gam = cm(35.0), cm(106.0)
    sd = DrudeLorentz.single(lam, gam)
    # adaptive quadrature on [0, 50 gamma] plus the analytic 1/w^2 tail bound
    body, _ = integrate.quad(lambda w: lam * gam / (w**2 + gam**2), 0, 50 * gam, epsrel=1e-12)
    tail = lam * gam * (math.pi / 2 - math.atan(50)) / gam
    assert reorganization_energy(sd) == pytest.approx(body + tail, rel=1e-8)


@pytest.mark.parametrize("sd", [
    SuperOhmic(cm(180), cm(200)),
    DrudeLorentz.single(cm(50), cm(100)),
    AdolphsRenger(0.29, 0.8, 0.5, cm(0.056), cm(1.94)),
    ModeComb(((0.1, cm(200.0)), (0.05, cm(700.0))), cm(5.0)),
])
def test_scaled_by_zero(sd):
    assert reorganization_energy(sd.scale(0.0)) == 0.0


def test_reorganization_additive():
    a = SuperOhmic(cm(80), cm(100))
    b = ModeComb(((0.02, cm(300.0)), (0.01, cm(750.0))), cm(11.0))
    assert reorganization_energy(combine([a, b])) == pytest.approx(
        reorganization_energy(a) + reorganization_energy(b), rel=1e-8)


@pytest.mark.parametrize("name", ["fmo7", "lh2", "helix102"])
def test_preset_densities_nonnegative_on_log_grid(name):
    pre = preset_network(name)
    w = np.logspace(-4, 4, 10_000) * CM_TO_RADPS
    for sd in set(pre.baths):
        J = eval_spectral_density(sd, w)
        assert np.all(J >= 0)
        assert eval_spectral_density(sd, 0.0) == 0.0


def test_dipole_coupling_reference_cases():
    norm = ev(0.4)
    z = np.array([0.0, 0.0, 1.0])
    g = DipoleGeometry([[0, 0, 0], [1, 0, 0]], [z, z], norm)
    assert dipole_coupling(g, 0, 1) == pytest.approx(norm, rel=1e-14)
    x = np.array([1.0, 0.0, 0.0])
    g = DipoleGeometry([[0, 0, 0], [1, 0, 0]], [x, x], norm)
    assert dipole_coupling(g, 0, 1) == pytest.approx(-2 * norm, rel=1e-14)
    g = DipoleGeometry([[0, 0, 0], [2, 0, 0]], [z, z], norm)
    assert dipole_coupling(g, 0, 1) == pytest.approx(norm / 8, rel=1e-14)
    g = DipoleGeometry([[0, 0, 0], [0, 0, 0]], [z, z], norm)
    with pytest.raises(ZeroDivisionError):
        dipole_coupling(g, 0, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dipole_coupling_symmetric(seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(5, 3)) * 3
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    g = DipoleGeometry(pos, d, 1.0)
    V = coupling_matrix(g)
    for n in range(5):
        for m in range(n + 1, 5):
            assert dipole_coupling(g, n, m) == dipole_coupling(g, m, n)
            assert V[n, m] == pytest.approx(dipole_coupling(g, n, m), rel=1e-12, abs=1e-15)


def test_helix_geometry_and_energies():
    p = HelixParams()
    geom = helix_geometry(p, 1.0)
    np.testing.assert_allclose(geom.positions[0], [4, 0, 0])
    net = build_helix(p)
    assert net.n_sites == 102
    tri = net.energies.reshape(-1, 3)
    assert np.all(tri == tri[:, :1])
    np.testing.assert_allclose(np.diff(tri[:, 0]), cm(0.005 * EV_TO_CM), rtol=1e-12)


def test_helix_nearest_neighbour_brute_force():
    p = HelixParams()
    norm = ev(0.4)
    net = build_helix(p, dipole_norm=norm)
    # independent geometry: sites 0 and 1 share i = 0, positions differ by s along y
    r0 = np.array([p.r, 0.0, 0.0])
    r1 = np.array([p.r, p.s, 0.0])
    t = np.array([0.0, p.v, p.r * p.theta])
    t /= np.linalg.norm(t)
    r = r1 - r0
    dist = np.linalg.norm(r)
    kappa = t @ t - 3 * (t @ r / dist) ** 2
    assert net.couplings[0, 1] == pytest.approx(norm * kappa / dist**3, rel=1e-12)
    # default normalization pins the intra-triplet neighbour coupling to 350 cm^-1
    assert to_cm(build_helix(p).couplings[0, 1]) == pytest.approx(350.0, rel=1e-12)


def test_fmo_preset():
    pre = preset_network("fmo7")
    H = pre.network.hamiltonian()
    assert to_cm(H[0, 0]) == pytest.approx(240)
    assert to_cm(H[0, 1]) == pytest.approx(-87.7)
    assert to_cm(H[2, 2]) == 0.0
    assert int(np.argmin(pre.network.energies)) == 2
    np.testing.assert_allclose(to_cm(H), FMO_H0_CM, atol=1e-12)
    assert pre.temperature == 300.0


def test_lh2_preset():
    pre = preset_network("lh2")
    net = pre.network
    assert net.n_sites == 24
    assert len(pre.groups["B800"]) == 8 and len(pre.groups["B850"]) == 16
    i = net.labels.index
    assert to_cm(net.couplings[i("aB850_0"), i("bB850_0")]) == pytest.approx(408)
    assert to_cm(net.couplings[i("bB850_0"), i("aB850_1")]) == pytest.approx(366)
    assert to_cm(net.couplings[i("B800_0"), i("aB850_0")]) == pytest.approx(52)
    assert to_cm(net.couplings[i("B800_0"), i("bB850_0")]) == pytest.approx(40)
    assert to_cm(net.energies[i("bB850_3")]) == pytest.approx(80)
    nn = preset_network("lh2", nearest_neighbor_only=True).network
    assert np.count_nonzero(nn.couplings) == 2 * 4 * 8


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset_network("lh3")


def test_mode_file_roundtrip(tmp_path):
    f = tmp_path / "modes.txt"
    f.write_text("# w S\n100 0.01\n250, 0.02\n")
    mc = load_mode_file(f, cm(5.0), CM_TO_RADPS)
    assert mc.modes == ((0.01, cm(100.0)), (0.02, cm(250.0)))
    f.write_text("100\n")
    with pytest.raises(ValueError, match="two columns"):
        load_mode_file(f, cm(5.0))


def test_mode_comb_clusters_in_frequency_order():
    mc = ModeComb(tuple((0.01, cm(w)) for w in [500, 100, 300, 200, 400, 600, 700]), cm(5.0))
    cl = mc.clusters(5)
    assert [len(c.modes) for c in cl] == [5, 2]
    w = [m[1] for c in cl for m in c.modes]
    assert w == sorted(w)

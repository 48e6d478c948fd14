import numpy as np

from varpolaron.network import Network
from varpolaron.spectral import SuperOhmic
from varpolaron.units import cm


def random_network(rng, n, e_scale=400.0, v_scale=60.0):
    """Energies uniform in [0, e_scale] cm^-1, Gaussian symmetric couplings."""
    E = rng.uniform(0, e_scale, n)
    V = np.triu(rng.normal(0, v_scale, (n, n)), 1)
    return Network.from_cm(E, V + V.T)


def random_baths(rng, n):
    return [SuperOhmic(cm(rng.uniform(20, 200)), cm(rng.uniform(80, 300))) for _ in range(n)]


def rel_err(a, b, floor=1e-300):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

"""Unit conversions.

Everything inside the library works with hbar = 1, energies and angular
frequencies in rad/ps and times in ps.  Conversions to and from the user
facing units (cm^-1, eV, K, ps, nm) happen at the I/O boundary only.
"""

import numpy as np

#: speed of light in cm/s
C_CM_PER_S = 2.99792458e10
#: one wavenumber (cm^-1) expressed as an angular frequency in rad/ps
CM_TO_RADPS = 2.0 * np.pi * C_CM_PER_S * 1e-12
#: Boltzmann constant in cm^-1 / K
KB_CM_PER_K = 0.695034800
#: one electronvolt expressed in cm^-1
EV_TO_CM = 8065.543937


def _scaled(value, factor):
    if np.ndim(value):
        return np.asarray(value) * factor
    return value * factor


def cm(value):
    """Convert wavenumbers (cm^-1) to rad/ps."""
    return _scaled(value, CM_TO_RADPS)


def to_cm(value):
    """Convert rad/ps to wavenumbers (cm^-1)."""
    return _scaled(value, 1.0 / CM_TO_RADPS)


def ev(value):
    """Convert electronvolts to rad/ps."""
    return _scaled(value, EV_TO_CM * CM_TO_RADPS)


def kelvin_to_beta(temperature):
    """Inverse temperature in ps/rad for a temperature in K.

    ``temperature = 0`` maps to ``inf`` and ``inf`` maps to ``0``.
    """
    if temperature <= 0:
        return np.inf
    if np.isinf(temperature):
        return 0.0
    return 1.0 / (KB_CM_PER_K * temperature * CM_TO_RADPS)


def beta_to_kelvin(beta):
    if beta == 0:
        return np.inf
    if np.isinf(beta):
        return 0.0
    return 1.0 / (KB_CM_PER_K * beta * CM_TO_RADPS)

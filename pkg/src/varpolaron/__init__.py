"""Variational polaron master-equation toolkit for exciton transport in large networks.

Internal units: hbar = 1, energies and angular frequencies in rad/ps, times
in ps.  See :mod:`varpolaron.units` for conversions at the I/O boundary.
"""

from .correlation import analytic_propagator, assemble_correlation_tables, phi_xy, phi_yz, phi_zz
from .dynamics import (
    Trajectory,
    bloch_redfield_propagate,
    build_system_operators,
    polaron_limit_propagate,
    propagate,
    tcl2_generator,
    variational_dynamics,
)
from .expsum import ExponentialSum, correlation_expansion, fit_exponentials, rate_gamma
from .network import HelixParams, Network, build_helix, preset_network
from .observables import coherence_length, localization_map, mode_ablation, scan, thermal_state, to_untransformed_frame, transfer_time
from .spectral import AdolphsRenger, DrudeLorentz, ModeComb, SuperOhmic, combine, reorganization_energy
from .variational import VariationalSolution, fixed_solution, solve_global_oracle, solve_self_consistent

__all__ = [
    "AdolphsRenger",
    "DrudeLorentz",
    "ExponentialSum",
    "HelixParams",
    "ModeComb",
    "Network",
    "SuperOhmic",
    "Trajectory",
    "VariationalSolution",
    "analytic_propagator",
    "assemble_correlation_tables",
    "bloch_redfield_propagate",
    "build_helix",
    "build_system_operators",
    "coherence_length",
    "combine",
    "correlation_expansion",
    "fit_exponentials",
    "fixed_solution",
    "localization_map",
    "mode_ablation",
    "phi_xy",
    "phi_yz",
    "phi_zz",
    "polaron_limit_propagate",
    "preset_network",
    "propagate",
    "rate_gamma",
    "reorganization_energy",
    "scan",
    "solve_global_oracle",
    "solve_self_consistent",
    "tcl2_generator",
    "thermal_state",
    "to_untransformed_frame",
    "transfer_time",
    "variational_dynamics",
]

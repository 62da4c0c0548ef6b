"""Physical constants (CODATA 2018 via scipy) used throughout the package.

Everything is SI. Spin Hamiltonians are handled internally in angular
frequency units (rad/s), so energies are ``hbar * omega``.
"""

from scipy import constants as _c

MU_B = _c.physical_constants["Bohr magneton"][0]  # J/T
HBAR = _c.hbar  # J s
H = _c.h  # J s
K_B = _c.k  # J/K
MU_0 = _c.physical_constants["vacuum mag. permeability"][0]  # N/A^2
TWO_PI = 2.0 * _c.pi

#: Bohr magneton over hbar, rad/s/T. ``g * MU_B_OVER_HBAR`` is a gyromagnetic ratio.
MU_B_OVER_HBAR = MU_B / HBAR


def gyro_to_g(gamma_over_2pi):
    """Convert a gyromagnetic ratio gamma/2pi (Hz/T) to a g-factor."""
    return gamma_over_2pi * H / MU_B


def g_to_gyro(g):
    """Gyromagnetic ratio gamma (rad/s/T) for a g-factor."""
    return g * MU_B_OVER_HBAR

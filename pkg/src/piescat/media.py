"""Material constants and the scalar Green's function.

Time convention is e^{+j omega t}; the kernel is e^{-jkR}/(4 pi R) and the
wavenumber branch is chosen with Im(k) <= 0 so interior waves decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import constants

from .errors import SingularEvaluation

EPS0 = constants.epsilon_0
MU0 = constants.mu_0
C0 = constants.c
ETA0 = MU0 * C0  # free-space wave impedance, ~376.73 ohm


@dataclass(frozen=True)
class MaterialParams:
    """Homogeneous material at a single angular frequency.

    epsilon : permittivity (F/m)
    mu      : permeability (H/m)
    sigma   : conductivity (S/m), >= 0
    omega   : angular frequency (rad/s), > 0
    """

    epsilon: float
    mu: float
    sigma: float
    omega: float

    def __post_init__(self):
        if self.omega <= 0.0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")

    @classmethod
    def free_space(cls, omega: float) -> "MaterialParams":
        return cls(EPS0, MU0, 0.0, omega)

    @classmethod
    def from_relative(cls, eps_r: float, mu_r: float, sigma: float,
                      frequency: float) -> "MaterialParams":
        """Build from relative constants and frequency in Hz."""
        return cls(eps_r * EPS0, mu_r * MU0, sigma, 2.0 * np.pi * frequency)

    @property
    def k_squared(self) -> complex:
        w = self.omega
        return -1j * w * self.mu * (1j * w * self.epsilon + self.sigma)

    @property
    def k(self) -> complex:
        return wavenumber(self)

    @property
    def gamma(self) -> complex:
        """(j omega eps + sigma) mu; the Lorenz-gauge constant."""
        return (1j * self.omega * self.epsilon + self.sigma) * self.mu

    @property
    def skin_depth(self) -> float:
        """-1/Im(k); infinite for a lossless material."""
        im = self.k.imag
        return np.inf if im == 0.0 else -1.0 / im


def wavenumber(m: MaterialParams) -> complex:
    """Complex wavenumber with the decaying branch Im(k) <= 0."""
    k = np.sqrt(complex(m.k_squared))
    if k.imag > 0.0:
        k = -k
    return complex(k)


def free_space_wavenumber(omega: float) -> float:
    return omega / C0


@dataclass(frozen=True)
class GreensKernel:
    """Scalar Helmholtz kernel e^{-jkR}/(4 pi R) for a fixed wavenumber.

    `scale` is a characteristic problem length used only to decide when an
    evaluation is numerically singular.
    """

    k: complex
    scale: float = 1.0

    @classmethod
    def for_material(cls, m: MaterialParams, scale: float = 1.0) -> "GreensKernel":
        return cls(wavenumber(m), scale)

    @property
    def singular_radius(self) -> float:
        return 1e-14 * self.scale


def _separations(r, rp):
    d = np.asarray(r, dtype=float) - np.asarray(rp, dtype=float)
    R = np.sqrt(np.sum(d * d, axis=-1))
    return d, R


def greens(kernel: GreensKernel, r, rp):
    """G(r, r') for broadcastable point arrays of shape (..., 3)."""
    _, R = _separations(r, rp)
    if np.any(R < kernel.singular_radius):
        raise SingularEvaluation(
            f"Green's function evaluated at separation < {kernel.singular_radius:g} m")
    return np.exp(-1j * kernel.k * R) / (4.0 * np.pi * R)


def greens_grad(kernel: GreensKernel, r, rp):
    """Gradient of G with respect to the observation point r.

    grad G = (r - r')/R * (-jk - 1/R) * G
    """
    d, R = _separations(r, rp)
    if np.any(R < kernel.singular_radius):
        raise SingularEvaluation(
            f"Green's gradient evaluated at separation < {kernel.singular_radius:g} m")
    G = np.exp(-1j * kernel.k * R) / (4.0 * np.pi * R)
    fac = (-1j * kernel.k - 1.0 / R) * G / R
    return d * fac[..., np.newaxis]


def negligible_interaction(kernel: GreensKernel, R: float, threshold: float = 1e-30) -> bool:
    """True when the damping factor e^{Im(k) R} falls below `threshold`.

    Such pairs are dropped from assembly (entries set to exact zero): they
    underflow in double precision anyway, and skipping them keeps the
    high-conductivity interior assembly well-behaved.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    im = np.imag(kernel.k)
    if im >= 0.0 or R <= 0.0:
        return False
    return im * R < np.log(threshold)

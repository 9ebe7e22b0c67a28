"""piescat: potential-based boundary-element EM scattering solver."""

__version__ = "0.1.0"

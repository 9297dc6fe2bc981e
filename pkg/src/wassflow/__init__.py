"""Neural parametric Fokker-Planck solver built on planar normalizing flows."""

__version__ = "0.1.0"

"""Two-scale finite element homogenization (FE-HMM / FE2) for plane linear elasticity."""

__version__ = "0.1.0"

"""Volumetric two-point Dixon fat-water separation with a 3D conditional GAN,
built on a small numpy autodiff engine."""

__version__ = "0.1.0"

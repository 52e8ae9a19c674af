"""Mixup, manifold mixup and asymptotic midpoint mixup on a small fp64 autodiff engine,
with alignment/uniformity collapse diagnostics."""

__version__ = "0.1.0"

"""Hyperspherical product-space VAE toolkit.

vMF layer with exact log-normalisers and closed-form KL to the uniform
distribution, a product-of-hyperspheres composition engine, and a small
numpy VAE trainer/evaluator built on them.
"""

from ._accel import BACKEND
from .product import CompositionSpec, ProductVmf, parse_composition, product_kl
from .special import bessel_ratio, log_bessel_i, log_bessel_i_normalized
from .vmf import VmfDistribution, kl_to_uniform

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CompositionSpec",
    "ProductVmf",
    "VmfDistribution",
    "bessel_ratio",
    "kl_to_uniform",
    "log_bessel_i",
    "log_bessel_i_normalized",
    "parse_composition",
    "product_kl",
]

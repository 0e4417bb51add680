"""SIReN-VAE: a VAE whose prior and inference networks are graphical
residual flows encoding an arbitrary Bayesian-network dependency structure."""

from sirenvae.estimator import SirenVaeDensity, VanillaVaeDensity
from sirenvae.graph import BayesNet, InverseGraph, parse_gbn, serialize_gbn
from sirenvae.model import SirenVae, VanillaVae

__version__ = "0.1.0"

__all__ = [
    "BayesNet",
    "InverseGraph",
    "parse_gbn",
    "serialize_gbn",
    "SirenVae",
    "VanillaVae",
    "SirenVaeDensity",
    "VanillaVaeDensity",
    "__version__",
]

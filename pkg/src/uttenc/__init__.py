"""uttenc: sequence-to-fixed-vector encoders for utterance classification.

Classical encoders (GMM supervector, Fisher vector, VLAD), their
learnable counterparts (TAP, NetFV, NetVLAD) with hand-derived
gradients, and a training/evaluation harness for variable-length
sequence classification.
"""

from .backend import BACKEND
from .classical import (EncodedVector, fisher_vector, normalize_encoding,
                        supervector, vlad)
from .gmm import DiagonalGmm, KmeansCodebook, gmm_fit_em, kmeans_fit, posteriors
from .netlayers import (FrontEndParams, NetFvParams, NetVladParams,
                        netfv_forward, netvlad_forward, tap_forward)
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DiagonalGmm", "EncodedVector", "FrontEndParams",
    "KmeansCodebook", "NetFvParams", "NetVladParams", "Rng",
    "fisher_vector", "gmm_fit_em", "kmeans_fit", "netfv_forward",
    "netvlad_forward", "normalize_encoding", "posteriors", "supervector",
    "tap_forward", "vlad",
]

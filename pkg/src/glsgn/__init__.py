"""Global-local stepwise generative network for image background restoration.

Self-contained desk-scale pipeline: a minimal reverse-mode tensor engine,
the four-pathway generator with attention consistency, patch normalization
and pyramid synthesis, synthetic degradation generators, and a seeded
training/evaluation loop.
"""

from .autodiff import Tensor
from .config import GlsgnConfig, LossWeights, TrainRun
from .model import GlsgnModel, GlsgnOutput, ablation_variant

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GlsgnConfig",
    "LossWeights",
    "TrainRun",
    "GlsgnModel",
    "GlsgnOutput",
    "ablation_variant",
    "__version__",
]

"""CATANet: lightweight image super-resolution by content-aware token
aggregation, built from scratch on float32 numpy with its own tape autograd."""

from .network import CATANet, ModelConfig, forward, forward_batch, multi_adds, param_count
from .checkpoint import checkpoint_load, checkpoint_save

__version__ = "0.1.0"

__all__ = [
    "CATANet",
    "ModelConfig",
    "forward",
    "forward_batch",
    "multi_adds",
    "param_count",
    "checkpoint_load",
    "checkpoint_save",
    "__version__",
]

"""turbkit: atmospheric-turbulence degradation simulation, a channel-attention
restoration transformer with paired reconstruction/degradation heads, and the
matching evaluation metrics (PSNR, SSIM, word detection ratio, detected-LCS).
"""

from .errors import (
    CheckpointError,
    DataError,
    NonFiniteError,
    ShapeError,
    TurbkitError,
)
from .tensor import Rng, derive_seed

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DataError",
    "NonFiniteError",
    "Rng",
    "ShapeError",
    "TurbkitError",
    "derive_seed",
    "__version__",
]

"""Size-aware post-training codec for 3D Gaussian Splatting models."""

import numba

# the bundled TBB is too old for numba; the workqueue layer is always available
numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"

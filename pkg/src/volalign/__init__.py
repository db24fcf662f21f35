"""Desk-scale multi-scale volume/report contrastive alignment toolkit."""

import os as _os

# Cap numeric worker threads before numpy loads; single-threaded by default
# so fixed-seed runs are bitwise reproducible.
_threads = _os.environ.get("MV3D_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from . import autodiff, bank, corpus, dataio, evaluate, losses, mi, nn  # noqa: E402,F401
from .autodiff import Tape, Tensor  # noqa: E402
from .bank import SemanticBank  # noqa: E402
from .corpus import PairedSample, World, WorldConfig  # noqa: E402
from .encoders import (AlignmentModel, TextEncoder, TextEncoderConfig,  # noqa: E402
                       VisionEncoder, VisionEncoderConfig, downsample_mask)
from .errors import VolalignError  # noqa: E402
from .losses import LossBundle, Temperature  # noqa: E402
from .trainer import TrainConfig, Trainer  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "AlignmentModel", "LossBundle", "PairedSample", "SemanticBank", "Tape",
    "Temperature", "Tensor", "TextEncoder", "TextEncoderConfig", "TrainConfig",
    "Trainer", "VisionEncoder", "VisionEncoderConfig", "VolalignError",
    "World", "WorldConfig", "downsample_mask", "__version__",
]

"""3-D CNN lung nodule proposals on numpy: kernels, network, training, FROC and a benchmark lab."""

__version__ = "0.1.0"

from .ctio import (CtVolume, NoduleAnnotation, generate_synthetic_dataset, generate_synthetic_volume,  # noqa: E402
                   resample_isotropic)
from .estimators import IntensityNormalizer, IsotropicResampler, NoduleProposer  # noqa: E402
from .evaluation import Candidate, FrocCurve, froc  # noqa: E402
from .exceptions import (ConfigError, DataError, Nodule3dError, NonFiniteLossError,  # noqa: E402
                         ShapeError)
from .network import NetworkConfig, build_network  # noqa: E402
from .trainer import TrainConfig, lr_at, train  # noqa: E402

__all__ = [
    "Candidate", "ConfigError", "CtVolume", "DataError", "FrocCurve", "IntensityNormalizer",
    "IsotropicResampler", "NetworkConfig", "Nodule3dError", "NoduleProposer", "NoduleAnnotation",
    "NonFiniteLossError", "ShapeError", "TrainConfig", "build_network", "froc",
    "generate_synthetic_dataset", "generate_synthetic_volume", "lr_at", "resample_isotropic", "train",
]

"""Legendre memory units with parallel delay gating."""

from .autograd import Tape, backward
from .config import RunConfig, load_config, parse_config
from .datasets import SequenceBatch
from .errors import (ConfigError, FormatError, InvalidArgumentError, InvalidStateError,
                     NumericOverflowError, PdmuError, UnsupportedModeError)
from .lmu_cell import LmuLayerParams, init_lmu, lmu_forward, window_reconstruct
from .model import ModelSpec, Network, build_network
from .pdmu_cell import GateMatrix, PdmuLayerParams, PdmuStream, init_pdmu, pdmu_forward
from .spiking import LifConfig, spiking_dmu_forward
from .ssm import (ContinuousSystem, DiscreteSystem, legendre_system, pade_matrices,
                  sequential_scan, parallel_scan, fft_convolve, zoh_discretize)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContinuousSystem", "DiscreteSystem", "FormatError", "GateMatrix",
    "InvalidArgumentError", "InvalidStateError", "LifConfig", "LmuLayerParams", "ModelSpec",
    "Network", "NumericOverflowError", "PdmuError", "PdmuLayerParams", "PdmuStream",
    "RunConfig", "SequenceBatch", "Tape", "UnsupportedModeError", "backward", "build_network",
    "fft_convolve", "init_lmu", "init_pdmu", "legendre_system", "lmu_forward", "load_config",
    "pade_matrices", "parallel_scan", "parse_config", "pdmu_forward", "sequential_scan",
    "spiking_dmu_forward", "window_reconstruct", "zoh_discretize",
]

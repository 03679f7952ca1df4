"""Desk-scale simulator for spectral-prompt federated foundation-model training.

Clients embed the low-pass magnitude spectrum of their images as unit-norm
tokens, retrieve similar prototypes from a server-side bank, and condition a
small shared backbone on them through cross-attention and prefix/suffix
prompts.  Everything runs on numpy with a small reverse-mode autodiff engine.
"""
from .bank import KnowledgeBank, RetrievalResult
from .config import ExperimentConfig, load_config, parse_config
from .exceptions import (ClientError, ConfigError, ContractError, DimensionError, EmptyBankError,
                         SpecfedError)
from .experiment import RunResult, build_federation, run_experiment
from .federation import ClientData, Federation, RoundConfig, RoundReport, sample_clients
from .models import ModelConfig, OmniModel
from .spectral import SpectralToken, SpectralTokenizer, Spectrum, fft2d, freqmix, magnitude_spectrum
from .tensor import SGD, Tensor

__version__ = "0.1.0"

__all__ = [
    "ClientData", "ClientError", "ConfigError", "ContractError", "DimensionError", "EmptyBankError",
    "ExperimentConfig", "Federation", "KnowledgeBank", "ModelConfig", "OmniModel", "RetrievalResult",
    "RoundConfig", "RoundReport", "SGD", "SpecfedError", "SpectralToken", "SpectralTokenizer", "Spectrum",
    "RunResult", "Tensor", "build_federation", "fft2d", "freqmix", "load_config", "magnitude_spectrum", "parse_config",
    "run_experiment", "sample_clients",
]

"""Multidimensional correlation spectroscopic imaging: forward model, phantoms,
Cramer-Rao bounds, a spatially regularized ADMM solver and spectral analysis."""

from .model import (
    CompartmentModel,
    ConfigurationError,
    ContrastEncoding,
    DecayDictionary,
    Mode,
    SpectralGrid,
    build_dictionary,
    standard_schedule,
)
from .phantom import MeasuredDataset, NoiseModel, NoiseSpec, PhantomSpec, standard_phantom
from .solver import (
    AdmmState,
    ConvergenceReport,
    NumericalFailure,
    SolverConfig,
    SpectroscopicImage,
    nnls_init,
    rescale_penalties,
    solve,
)
from .crlb import CrlbResult, FisherMode, FisherSpec, Sharing, Unidentifiable, crlb
from .analysis import Peak, PeakSet, SpectralRegion, detect_peaks, integrate_region, mean_spectrum

__version__ = "0.1.0"

__all__ = [
    "AdmmState", "CompartmentModel", "ConfigurationError", "ContrastEncoding", "ConvergenceReport",
    "CrlbResult", "DecayDictionary", "FisherMode", "FisherSpec", "MeasuredDataset", "Mode",
    "NoiseModel", "NoiseSpec", "NumericalFailure", "Peak", "PeakSet", "PhantomSpec", "Sharing",
    "SolverConfig", "SpectralGrid", "SpectralRegion", "SpectroscopicImage", "Unidentifiable",
    "build_dictionary", "crlb", "detect_peaks", "integrate_region", "mean_spectrum",
    "nnls_init", "standard_phantom", "standard_schedule", "rescale_penalties", "solve",
]

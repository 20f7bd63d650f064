"""Monitor-proximity equity analysis: distances, nested mixed models,
Moran's I on residuals and a BYM spatial-error model."""
__version__ = "0.1.0"

from ._backend import BACKEND
from .bym import BymSpec, GammaPrior, McmcConfig, fit_bym, fit_bym_arrays, icar_conditional
from .errors import ConvergenceError, NoCandidateError, ValidationError
from .geo import GeoPoint, SpatialIndex, haversine_distance, nearest_monitor
from .mlm import (EJAttribute, ModelSpec, fit_lmm, fit_lmm_arrays, percent_change_per_delta,
                  variance_apportionment, wald_ci)
from .moran import MoranNull, moran_expectation, morans_i
from .neighbors import NeighborConfig, NeighborGraph, Scheme, build_graph
from .pipeline import (RunOptions, SuiteConfig, build_suite, compute_distances, ingest,
                       run_suite, zscore)
from .synth import Preset, SynthConfig, generate

__all__ = [
    "BACKEND", "BymSpec", "ConvergenceError", "EJAttribute", "GammaPrior", "GeoPoint",
    "McmcConfig", "ModelSpec", "MoranNull", "NeighborConfig", "NeighborGraph",
    "NoCandidateError", "Preset", "RunOptions", "Scheme", "SpatialIndex", "SuiteConfig",
    "SynthConfig", "ValidationError", "build_graph", "build_suite", "compute_distances",
    "fit_bym", "fit_bym_arrays", "fit_lmm", "fit_lmm_arrays", "generate", "haversine_distance",
    "icar_conditional", "ingest", "moran_expectation", "morans_i", "nearest_monitor",
    "percent_change_per_delta", "run_suite", "variance_apportionment", "wald_ci", "zscore",
]

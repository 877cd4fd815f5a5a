"""Spectral laboratory for a scalar field coupled to a harmonic crystal."""

from .bloch_cell import (
    CouplingSpec,
    GaussianTerm,
    ModelParams,
    SpectralData,
    build_h_theta,
    check_r2,
    check_r2_prime,
    coupling_coefficients,
    matrix_function,
    spectral_decompose,
    theta_grid,
)
from .errors import (
    ConfigError,
    DegenerateBand,
    DimensionMismatch,
    FieldCrystalError,
    GridMismatch,
    NonPositiveSpectrum,
    NonRealField,
    NotPSD,
    SingularFunction,
    WraparoundRisk,
)

__version__ = "0.1.0"

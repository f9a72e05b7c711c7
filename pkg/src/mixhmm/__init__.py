"""Mixtures of personalized input-output hidden Markov models."""
from .core import (
    FitResult,
    HMMParameters,
    MixtureParameters,
    ModelSpec,
    NumericalError,
    Offsets,
    PersonalEffects,
    Sequence,
    SequenceDataset,
    ValidationError,
    Violation,
    validate_dataset,
    validate_parameters,
)

__version__ = "0.1.0"

from .em import FitOptions, fit  # noqa: E402
from .mixture import assign_clusters, build_block_diagonal, extract_components  # noqa: E402
from .selection import count_free_parameters, criteria, select  # noqa: E402
from .variational import fit_model, fit_personalized  # noqa: E402

__all__ = [
    "FitOptions",
    "FitResult",
    "HMMParameters",
    "MixtureParameters",
    "ModelSpec",
    "NumericalError",
    "Offsets",
    "PersonalEffects",
    "Sequence",
    "SequenceDataset",
    "ValidationError",
    "Violation",
    "assign_clusters",
    "build_block_diagonal",
    "count_free_parameters",
    "criteria",
    "extract_components",
    "fit",
    "fit_model",
    "fit_personalized",
    "select",
    "validate_dataset",
    "validate_parameters",
]

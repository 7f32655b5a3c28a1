"""Evolution strategies over the singular values of low-rank adapters.

A frozen base model carries trainable low-rank factor pairs; after a
supervised warm start, a distribution-based evolution strategy perturbs
only the top few singular values of each factor. Candidate evaluation is
forward-only and distributes over workers that exchange nothing but
seeds and scalar rewards.
"""

from .errors import (
    ConfigError,
    EvoSvdError,
    NumericalError,
    TransportError,
    exit_code_for,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EvoSvdError",
    "NumericalError",
    "TransportError",
    "exit_code_for",
    "__version__",
]

"""Federated customization of a small frozen language model.

Prefix tuning, adapters, full fine-tuning and distillation under FedAvg or
FedProx, on a synthetic restaurant table-to-text corpus.
"""

from .errors import (ConfigurationError, DimensionError, DivergenceError, FedCustomError,
                     GenerationError, InputError, LengthError, NumericError, PartitionError,
                     ValidationError)

__version__ = "0.1.0"

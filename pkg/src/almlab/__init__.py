"""Desk-scale audio-language model laboratory.

Audio encoder, sequence reduction and projection connector, embedding merge
into a decoder LM, LoRA fine-tuning, ablation grid, and MC / judge evaluation.
"""

__version__ = "0.1.0"

from .errors import AlmError, ConfigError, DataError, ExternalServiceError, NumericError  # noqa: E402,F401

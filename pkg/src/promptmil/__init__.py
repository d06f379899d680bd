"""Prompt-guided multiple-instance learning on precomputed patch embeddings.

Pipeline: zero-shot tissue selection, prompt-guided component grouping, a
two-stage transformer classifier, training/evaluation, Macenko stain
normalization and a synthetic planted-signal generator.
"""

__version__ = "0.1.0"

from .errors import DataError, PromptMILError  # noqa: E402,F401

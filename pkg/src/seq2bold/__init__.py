"""seq2bold: sequence-to-sequence Transformer encoding of fMRI responses.

Maps multimodal stimulus-feature sequences to parcellated brain-response
sequences with a causal Transformer encoder and an autoregressive decoder
that cross-attends to both the encoded stimulus and narrative-summary
embeddings, with subject-specific output heads on a shared trunk.
"""
__version__ = "0.1.0"

from .errors import Seq2BoldError

__all__ = ["Seq2BoldError", "__version__"]

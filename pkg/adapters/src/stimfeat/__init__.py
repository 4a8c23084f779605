"""stimfeat: stimulus feature exporters for the seq2bold encoding toolkit.

Runs pretrained backbones (or deterministic stubs) over video, audio,
transcripts, and narrative summaries, pools their hidden states per TR
according to fixed recipes, and writes FSB feature files plus manifest
fragments the primary toolkit consumes.
"""
__version__ = "0.1.0"

from .recipes import RECIPES, ExtractionRecipe

__all__ = ["RECIPES", "ExtractionRecipe", "__version__"]

"""Context-aware multimodal fusion re-ranker with a from-scratch autodiff core."""

__version__ = "0.1.0"

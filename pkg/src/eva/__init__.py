"""Compositional zero-shot learning with mixture-of-experts adapters and
semantic variant alignment, on a small numpy autodiff core."""

__version__ = "0.1.0"

"""Simultaneous multimodal machine translation on a small numpy autodiff core."""
__version__ = "0.1.0"

"""Mixed-precision quantization via learned scale-factor importance indicators."""

__version__ = "0.1.0"

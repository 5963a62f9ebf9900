"""Single-frame photoacoustic denoising and point-source reconstruction toolkit."""

__version__ = "0.1.0"

"""VQ-VAE voice conversion with a WaveNet decoder, built on a small numpy autodiff core."""

__version__ = "0.1.0"

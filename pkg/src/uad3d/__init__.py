"""VAE-based unsupervised anomaly detection for volumetric images, built on a small numpy autodiff core."""

__version__ = "0.1.0"

"""RGB-to-RAW reconstruction via deterministic latent flow matching."""
__version__ = "0.1.0"

"""View-invariant skeleton autoencoder with a motion-retargeting pretext task."""

__version__ = "0.1.0"

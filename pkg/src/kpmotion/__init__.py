"""Two-stage facial motion engine: implicit keypoints plus audio-driven diffusion."""

__version__ = "0.1.0"

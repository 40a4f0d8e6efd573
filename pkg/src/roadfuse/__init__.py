"""Multi-modal road extraction: satellite bands + GPS trajectories fused in encoder-decoder networks."""

__version__ = "0.1.0"

"""Few-shot radiance-field training with feature-manifold supervision."""

__version__ = "0.1.0"

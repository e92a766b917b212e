"""Self-supervised voxel-wise representation learning with balanced feature pyramids."""

__version__ = "0.1.0"

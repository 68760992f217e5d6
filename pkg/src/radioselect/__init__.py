"""Patient-specific radiomic feature selection for 3D volume classification."""

__version__ = "0.1.0"

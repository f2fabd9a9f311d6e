"""Missing-modality brain-tumor segmentation on synthetic phantoms."""

__version__ = "0.1.0"

"""Self-configuring planning and test-time toolkit for 3D medical object detection."""

from detpipe.dataio import BoundingBox, Case, Dataset, Volume, VolumeHeader, load_dataset

__all__ = ["BoundingBox", "Case", "Dataset", "Volume", "VolumeHeader", "load_dataset"]

__version__ = "0.1.0"

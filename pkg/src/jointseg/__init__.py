"""Joint point-cloud semantic segmentation and semantic scene completion in numpy."""

__version__ = "0.1.0"

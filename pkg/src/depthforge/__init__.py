"""Surface reconstruction from sparse SLAM clouds and ground-truth evaluation."""

__version__ = "0.1.0"

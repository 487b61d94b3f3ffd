"""Semantic point-cloud fusion, detector encodings, augmentation and KITTI evaluation."""

__version__ = "0.1.0"

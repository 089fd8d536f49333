"""OMSN: multi-scale skip-connection segmentation network for OCTA images."""

__version__ = "0.1.0"

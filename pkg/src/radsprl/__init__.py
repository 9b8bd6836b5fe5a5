"""Spatial role labeling for radiology report sentences with a Bi-LSTM-CRF."""

__version__ = "0.1.0"

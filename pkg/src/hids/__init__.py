"""Hybrid intrusion detection: autoencoder compression, SOM anomaly scoring and a DBN classifier."""

__version__ = "0.1.0"

"""Neural-data regularization of CNNs with a deep CCA branch."""

__version__ = "0.1.0"

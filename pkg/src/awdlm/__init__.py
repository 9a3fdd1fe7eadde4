"""AWD-LSTM language modelling on numpy, with an interpolated bi-gram baseline."""

__version__ = "0.1.0"

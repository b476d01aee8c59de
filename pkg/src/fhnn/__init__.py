"""FHNN: factorized multi-scale recurrent forecasting for driver-response
systems, with LSTM baselines, a synthetic catchment simulator, and the
training/evaluation tooling around them."""

__version__ = "0.1.0"

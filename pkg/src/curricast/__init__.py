"""Hierarchical revenue forecasting with curriculum-trained LSTM and dilated CNN models."""

__version__ = "0.1.0"

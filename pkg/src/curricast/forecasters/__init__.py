from .dcnn import DcnnBatch, DcnnForecasterConfig, dcnn_forecast, dcnn_train_step, init_dcnn
from .features import FeatureEncoder, FeatureEncoding
from .lstm import (InsufficientHistoryError, LstmBatch, LstmForecasterConfig, init_lstm,
                   lstm_forecast, lstm_train_step)
from .state import ModelState, config_hash

__all__ = [
    "DcnnBatch", "DcnnForecasterConfig", "FeatureEncoder", "FeatureEncoding",
    "InsufficientHistoryError", "LstmBatch", "LstmForecasterConfig", "ModelState",
    "config_hash", "dcnn_forecast", "dcnn_train_step", "init_dcnn", "init_lstm",
    "lstm_forecast", "lstm_train_step",
]

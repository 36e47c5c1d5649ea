"""Multi-task LSTM turn-transition prediction from acoustic cues."""

__version__ = "0.1.0"

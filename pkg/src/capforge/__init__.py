"""Object-conditioned soft-attention LSTM image captioning in numpy."""

__version__ = "0.1.0"

"""Online speech recognition with a word-counting gate and windowed attention."""

__version__ = "0.1.0"

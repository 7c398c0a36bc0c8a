"""Code-switching ASR with interactive frame- and token-level language biases."""

__version__ = "0.1.0"

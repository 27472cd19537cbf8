"""Tagged multilingual NMT with sampling-based self-learning, at desk scale."""

__version__ = "0.1.0"

"""Joint sarcasm detection and sentiment analysis with task attention and interaction."""

__version__ = "0.1.0"

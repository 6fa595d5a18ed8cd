"""Role-oriented dialogue summarization with interacting user and agent decoders."""

__version__ = "0.1.0"

"""End-to-end neural speaker diarization with a masked-attention query decoder."""

__version__ = "0.1.0"

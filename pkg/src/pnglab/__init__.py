"""Desk-scale phoneme+grapheme masked-LM pretraining and TTS lab."""

__version__ = "0.1.0"

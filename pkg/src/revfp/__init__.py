"""Blind room volume and RT60 estimation from noisy reverberant speech."""

__version__ = "0.1.0"

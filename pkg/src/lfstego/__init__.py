"""Low-frequency image steganography: embed a secret image in a cover, recover it after distortion."""

__version__ = "0.1.0"

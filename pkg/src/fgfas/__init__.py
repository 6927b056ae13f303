"""Fine-grained three-channel annotation and training toolkit for face anti-spoofing."""

__version__ = "0.1.0"

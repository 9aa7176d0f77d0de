"""Two-stage persona dialogue: infer the partner's persona, then answer to it."""

__version__ = "0.1.0"

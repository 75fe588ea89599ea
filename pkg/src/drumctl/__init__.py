"""Load-following control laboratory for a drum-controlled microreactor."""

__version__ = "0.1.0"

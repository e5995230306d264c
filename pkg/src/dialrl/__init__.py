"""dialrl: desk-scale offline RL for dialogue response generation."""

__version__ = "0.1.0"

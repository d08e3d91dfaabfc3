"""Non-invasive probing of small self-supervised world models on synthetic physics."""

__version__ = "0.1.0"

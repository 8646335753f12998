"""Planning and simulation for cable-towed load transport by robot teams."""

__version__ = "0.1.0"

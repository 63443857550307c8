"""Language-conditioned tabletop placement: parse, ground, place."""

__version__ = "0.1.0"

"""Face template reconstruction attacks with neighborly de-convolutional networks."""

__version__ = "0.1.0"

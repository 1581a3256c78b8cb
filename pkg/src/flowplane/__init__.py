"""Deep reinforcement learning plane reformatting for 4D flow MRI."""

__version__ = "0.1.0"

"""kacflow: momentum-conserving Kac walk simulation and rate-function toolkit."""

__version__ = "0.1.0"

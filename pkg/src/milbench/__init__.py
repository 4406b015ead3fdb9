"""Shifted Mean MIL benchmark: data generator, Bayes oracle, pooling models, metrics."""

__version__ = "0.1.0"

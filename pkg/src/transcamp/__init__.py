"""Graph-transformer camera relocalization on synthetic pose graphs."""

__version__ = "0.1.0"

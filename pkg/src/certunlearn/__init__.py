"""Certified unlearning by rewinding gradient descent, with an executable bound harness."""

__version__ = "0.1.0"

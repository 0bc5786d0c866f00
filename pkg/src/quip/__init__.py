"""Desk-scale question-answering-infused pre-training of a bi-encoder."""

__version__ = "0.1.0"

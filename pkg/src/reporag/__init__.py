"""Retrieval-augmented repository-level code completion with an RL-trained retriever."""

__version__ = "0.1.0"

"""Recurrent networks whose per-step cell is a tree built by scored greedy merging."""

__version__ = "0.1.0"

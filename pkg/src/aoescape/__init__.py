"""Alternating optimization with escape searches over alternative subspaces,
for matrix factorization and MC+ penalized regression."""

__version__ = "0.1.0"

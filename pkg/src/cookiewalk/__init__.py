"""Excited (cookie) random walks on the integers.

Modules
-------
env
    Cookie environments and their consumption state.
walk
    Stepping, stopping rules and trajectory records.
oracle
    Exact hitting probabilities and visit counts on bounded windows.
estimators
    Seeded replica engine and Monte Carlo estimators.
blocks
    Block renormalization of a weakly biased walk and its coupling.
cli
    Command-line front end.
"""
__version__ = "0.1.0"

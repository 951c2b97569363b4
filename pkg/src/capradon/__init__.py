"""Synthetic imaging pipeline for a rotating coplanar capacitive array.

Submodules: greenfn (periodic kernel and electrode potential), weights
(sensitivity filters), phantom (test objects), forward (weighted Radon
sweeps), recon (filtered backprojection layers), cli (pipeline driver).
"""

__version__ = "0.1.0"

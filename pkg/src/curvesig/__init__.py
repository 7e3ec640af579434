"""Learned and axiomatic differential invariants of planar curves.

Modules
-------
geometry
    Curves, affine maps, sampling pmfs, downsampling, neighborhoods, canonical placement.
datasets
    Synthetic Fourier curves, deformed benchmark collections, JSON file format.
axiomatic
    Discrete Euclidean and equiaffine curvature / arc-length-derivative estimators.
nn
    Numpy MLP with batch normalization and sine activations, Adam, checkpoints.
training
    Tuplet sampling, invariance and orthogonality losses, the training loop.
matching
    Average Hausdorff distance and the shape-matching benchmark.
cli
    ``curvesig`` command-line interface.
"""
from .errors import CurveSigError, DataError, DegenerateError, NumericalError
from .geometry import AffineMap, PlanarCurve, random_affine
from .axiomatic import SignatureCurve, axiomatic_signature

__all__ = ["AffineMap", "CurveSigError", "DataError", "DegenerateError", "NumericalError", "PlanarCurve",
           "SignatureCurve", "axiomatic_signature", "random_affine"]

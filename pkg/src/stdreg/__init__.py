"""Volumetric intensity standardization versus affine registration toolkit.

Modules by pipeline stage: :mod:`stdreg.scene` (container + file I/O),
:mod:`stdreg.phantom` (synthetic cohorts), :mod:`stdreg.correct` (shading
correction), :mod:`stdreg.standardize` (histogram-landmark standardization
and its controlled inverse), :mod:`stdreg.transform` (affine transforms and
the deformation grid), :mod:`stdreg.register` (SSD registration),
:mod:`stdreg.evaluate` (goodness reports), and :mod:`stdreg.pipeline`
(experiment orchestration).
"""

__version__ = "0.1.0"

"""Galerkin solver for elliptic problems on trimmed tensor-product B-spline patches.

The computational domain is a box-like patch minus (or intersected with) a
region described by an implicit function.  Cut elements are re-parameterized
with curved Lagrange tiles so that standard Gauss rules can be pushed onto the
active part of each element.
"""

__version__ = "0.1.0"

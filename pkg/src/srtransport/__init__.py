"""Rank-2 sub-Riemannian structures on R^4: singular line fields, volume
contraction, geodesics and discrete optimal transport with the squared
sub-Riemannian cost."""

__version__ = "0.1.0"

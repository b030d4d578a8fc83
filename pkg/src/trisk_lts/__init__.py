"""Shallow-water TRiSK dynamical core with local time stepping on spherical Voronoi meshes."""

__version__ = "0.1.0"

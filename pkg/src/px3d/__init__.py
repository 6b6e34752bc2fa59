"""px3d: 2D-to-3D oral reconstruction from panoramic projections and
3D-guided panoramic analysis, exercised on procedural phantoms."""

__version__ = "0.1.0"

from .volume import Volume

__all__ = ["Volume", "__version__"]

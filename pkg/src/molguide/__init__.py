"""Equivariant diffusion for small molecules with text-prompt guidance.

Subpackages are plain modules: ``geom`` (geometry and XYZ I/O), ``schedule``
(noise schedules), ``net`` (EGNN noise predictor), ``diffuse`` (training and
sampling), ``condition`` (prompt grammar and reference mixing), ``metrics``,
``data`` and ``cli``.
"""
from .errors import MolguideError

__version__ = "0.1.0"
__all__ = ["MolguideError", "__version__"]

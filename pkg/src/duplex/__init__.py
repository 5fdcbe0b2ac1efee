"""Homogenized transport in locally periodic perforated media.

Modules: ``geometry`` (radius field, level set), ``cell`` (cell problems and
effective coefficients), ``macroflow`` (Darcy flow), ``twoscale`` (coupled
macro/micro transport), ``reference`` (period-resolved solver) and ``cli``.
"""
from .errors import DuplexError

__version__ = "0.1.0"

__all__ = ["DuplexError", "__version__"]

"""Initialize utilities folder."""

from . import utils

__all__ = ["utils"]

"""NTK-based data selection engine (C++ core)."""

from ._core import *  # noqa: F401,F403
from ._core import NtkselError, __doc__  # noqa: F401

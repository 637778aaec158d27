"""Discrete-token trajectory planning stack: python surface over the C++ core."""

from tokenplan._core import *  # noqa: F401,F403
from tokenplan import _core

__all__ = [name for name in dir(_core) if not name.startswith("_")]

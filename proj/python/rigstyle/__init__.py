"""Rig-control style transfer: synthetic corpus, training and inference."""

from ._core import *  # noqa: F401,F403
from ._core import __doc__  # noqa: F401

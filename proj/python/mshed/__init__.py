"""Selective state-space language models with training-free structured pruning."""

import os as _os

_data = _os.path.join(_os.path.dirname(__file__), "data")
if _os.path.isfile(_os.path.join(_data, "corpus.txt")):
    _os.environ.setdefault("MSHED_DATA_DIR", _data)

from ._core import *  # noqa: E402,F401,F403
from ._core import __doc__  # noqa: E402,F401

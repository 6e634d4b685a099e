"""Kernel backend selection.

The compiled Cython module is preferred; the numpy implementation in
``pure.py`` is the fallback. Set QVIT_PURE_PYTHON=1 to force the fallback
(useful for benchmarking the two against each other).
"""

import os

from . import pure


def _load_compiled():
    try:
        from . import _core
    except ImportError:
        return None
    return _core


_compiled = _load_compiled()

if os.environ.get("QVIT_PURE_PYTHON"):
    active = pure
elif _compiled is not None:
    active = _compiled
else:
    active = pure

BACKEND_NAME = active.BACKEND_NAME

forward_batch = active.forward_batch
jacobian_batch = active.jacobian_batch


def available_backends():
    """Name -> module for every backend importable in this environment."""
    out = {"pure": pure}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def get_backend(name):
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"unknown kernel backend {name!r}") from None

"""Kernel backend selection.

The compiled core (``_core``, Cython) is preferred when its extension module
imported cleanly; otherwise the numpy fallback is used. ``SGTAIL_BACKEND=py``
or ``SGTAIL_BACKEND=cy`` forces a choice at import time, and :func:`use`
switches at runtime (tests and the backend benchmark rely on this).
"""

import os

from . import py_kernels

_BACKENDS = {"py": py_kernels}

try:
    from . import _core

    _BACKENDS["cy"] = _core
except ImportError:
    _core = None


def available():
    """Names of importable backends."""
    return sorted(_BACKENDS)


def get(name):
    """Kernel module for `name` ('py' or 'cy')."""
    if name not in _BACKENDS:
        raise KeyError(f"unknown backend {name!r}; available: {available()}")
    return _BACKENDS[name]


def use(name):
    """Switch the active backend; returns the previously active name."""
    global kernels
    previous = kernels.NAME
    kernels = get(name)
    return previous


_env = os.environ.get("SGTAIL_BACKEND")
if _env:
    kernels = get(_env)
else:
    kernels = _BACKENDS.get("cy", py_kernels)

"""Selects the scan kernels at import time.

``STATETUNE_BACKEND`` may be ``auto`` (default: compiled if importable),
``cython`` (fail if the extension is missing) or ``python``.
"""

import os

from . import _pykernels

_choice = os.environ.get("STATETUNE_BACKEND", "auto").lower()

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

if _choice == "python":
    kernels = _pykernels
elif _choice == "cython":
    if _ckernels is None:
        raise ImportError("STATETUNE_BACKEND=cython but the compiled extension is not built")
    kernels = _ckernels
else:
    kernels = _ckernels if _ckernels is not None else _pykernels

BACKEND = kernels.BACKEND


def available():
    """Names of the importable backends."""
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get(name=None):
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython" and _ckernels is not None:
        return _ckernels
    raise ValueError(f"backend {name!r} not available")

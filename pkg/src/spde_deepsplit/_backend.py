"""Selects the kernel implementation at import time.

The compiled extension is used when it imports cleanly.  Setting
``SPDE_DEEPSPLIT_BACKEND=python`` forces the numpy fallback;
``SPDE_DEEPSPLIT_BACKEND=cython`` makes a missing extension an error.
"""

import os

from . import _kernels_py

_choice = os.environ.get("SPDE_DEEPSPLIT_BACKEND", "auto").lower()

if _choice == "python":
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "cython":
            raise
        kernels = _kernels_py

BACKEND = kernels.BACKEND


def get_kernels(name=None):
    """Kernel module by name (``"python"`` or ``"cython"``); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")

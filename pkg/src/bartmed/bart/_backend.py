"""Select the kernel implementation at import.

The compiled extension is used when importable; set ``BARTMED_KERNELS=python``
to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("BARTMED_KERNELS", "").lower() == "python":
    kernels = _kernels_py
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        kernels = _kernels_py

BACKEND = kernels.BACKEND


def get_kernels(name=None):
    """Return a kernel module by name (``"cython"`` or ``"python"``)."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")

"""Kernel backend selection.

The NetFV / NetVLAD inner loops dominate training time, so they exist
twice: a compiled Cython extension (``uttenc._kernels``) and a pure
numpy fallback (``uttenc._kernels_np``).  The compiled one is preferred
when importable; set ``UTTENC_BACKEND=python`` or ``=compiled`` to force
a choice (forcing ``compiled`` raises if the extension is missing).
"""

from __future__ import annotations

import os

from . import _kernels_np

_requested = os.environ.get("UTTENC_BACKEND", "auto").lower()

if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(f"UTTENC_BACKEND must be auto/compiled/python, "
                       f"got {_requested!r}")

if _requested == "python":
    kernels = _kernels_np
    BACKEND = "python"
else:
    try:
        from . import _kernels as _compiled
        kernels = _compiled
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError("compiled kernels requested but the "
                               "uttenc._kernels extension is not built")
        kernels = _kernels_np
        BACKEND = "python"


def get_kernels(name: str | None = None):
    """Kernel module by name ("compiled"/"python"), default the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _kernels_np
    if name == "compiled":
        from . import _kernels as _compiled
        return _compiled
    raise ValueError(f"unknown backend {name!r}")

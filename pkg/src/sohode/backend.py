"""Program-executor backend selection.

The compiled extension (`_kernels_cy`) replays frozen tapes with C
loops and BLAS calls; the numpy executor in `_kernels_py` is the
fallback when the extension is unavailable. Selection happens once at
import and can be forced with SOHODE_BACKEND=python|cython.
"""

import os

from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:  # extension not built; pure-Python install
    _kernels_cy = None

_forced = os.environ.get("SOHODE_BACKEND", "").strip().lower()
if _forced == "python":
    _active = _kernels_py
elif _forced == "cython":
    if _kernels_cy is None:
        raise ImportError("SOHODE_BACKEND=cython but the compiled extension is missing")
    _active = _kernels_cy
else:
    _active = _kernels_cy if _kernels_cy is not None else _kernels_py

BACKEND_NAME = "cython" if _active is _kernels_cy and _kernels_cy is not None else "python"


def compile_program(records, tensors, root=None):
    return _active.compile_program(records, tensors, root)


def available_backends():
    out = {"python": _kernels_py}
    if _kernels_cy is not None:
        out["cython"] = _kernels_cy
    return out

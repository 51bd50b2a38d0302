"""Kernel dispatch: the compiled extension when importable, else numpy/scipy.

Set ``RECKNOW_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

if os.environ.get("RECKNOW_PURE_PYTHON") == "1":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

bpr_epoch = _impl.bpr_epoch
cooccurrence_csr = _impl.cooccurrence_csr

"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FOLLMER_KIT_PURE=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FOLLMER_KIT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels

pvar_terms = _impl.pvar_terms
compensated_sum = _impl.compensated_sum
block_oscillation = _impl.block_oscillation
takagi = _impl.takagi

__all__ = [
    "BACKEND",
    "pvar_terms",
    "compensated_sum",
    "block_oscillation",
    "takagi",
]

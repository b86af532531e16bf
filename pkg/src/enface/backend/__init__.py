"""Kernel backend selection.

The compiled Cython extension is preferred; the pure-Python fallback is used
when the extension is unavailable or when ``ENFACE_BACKEND=py`` is set.
"""

import os

_FORCED = os.environ.get("ENFACE_BACKEND", "").lower()

if _FORCED in ("py", "python"):
    from . import pykernels as kernels

    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _FORCED in ("c", "compiled"):
            raise
        from . import pykernels as kernels

        BACKEND = "python"


def active_backend() -> str:
    """Name of the kernel backend in use: 'compiled' or 'python'."""
    return BACKEND


ntt_forward = kernels.ntt_forward
ntt_inverse = kernels.ntt_inverse
arr_addmod = kernels.arr_addmod
arr_submod = kernels.arr_submod
arr_negmod = kernels.arr_negmod
arr_mulmod = kernels.arr_mulmod
arr_mulmod_scalar = kernels.arr_mulmod_scalar
arr_mac = kernels.arr_mac
arr_mac_perm = kernels.arr_mac_perm
weighted_sum_mod = kernels.weighted_sum_mod

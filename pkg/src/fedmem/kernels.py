"""Backend selection for the recurrence kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``FEDMEM_KERNELS=python`` to force the fallback.
Both backends agree to rounding error but are not bit-identical, so a run is
only reproducible byte-for-byte on the same backend.
"""

import os

from fedmem import _pykernels

BACKEND = "python"
cifg_forward = _pykernels.cifg_forward
cifg_backward = _pykernels.cifg_backward

if os.environ.get("FEDMEM_KERNELS", "").lower() != "python":
    try:
        from fedmem import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        cifg_forward = _ckernels.cifg_forward
        cifg_backward = _ckernels.cifg_backward

__all__ = ["BACKEND", "cifg_forward", "cifg_backward"]

"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it was built; otherwise
the NumPy implementations in ``_kernels_py`` are used.  Setting the
environment variable ``ACRSC_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ACRSC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

softplus_all = _impl.softplus_all
radon_forward = _impl.radon_forward
radon_adjoint = _impl.radon_adjoint
im2col = _impl.im2col

__all__ = ["BACKEND", "softplus_all", "radon_forward", "radon_adjoint", "im2col"]

"""Pick the compiled kernels when importable, else the numpy fallback.

Set ``MVEM_BACKEND=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
affine_paths = _fallback.affine_paths
affine_interacting = _fallback.affine_interacting
lsap = _fallback.lsap

if os.environ.get("MVEM_BACKEND", "").lower() not in ("python", "numpy"):
    try:
        from . import _core
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        affine_paths = _core.affine_paths
        affine_interacting = _core.affine_interacting
        lsap = _core.lsap

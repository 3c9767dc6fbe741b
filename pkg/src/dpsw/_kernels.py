"""Kernel selection: compiled extension when available, pure Python otherwise.

Set ``DPSW_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
the parity tests).
"""

import os

from . import _pav_py

BACKEND = "python"
pav_blocks = _pav_py.pav_blocks

if os.environ.get("DPSW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _pav as _pav_ext
    except ImportError:  # extension not built
        pass
    else:
        pav_blocks = _pav_ext.pav_blocks
        BACKEND = "cython"

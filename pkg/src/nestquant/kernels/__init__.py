"""Backend selection: compiled extension when importable, numpy otherwise.

Set NESTQUANT_NO_EXT=1 to force the pure-python fallback.
"""

import os

from . import fallback

if os.environ.get("NESTQUANT_NO_EXT", "") == "1":
    _core = None
else:
    try:
        from . import _core
    except ImportError:
        _core = None

HAVE_COMPILED = _core is not None


def backend_name() -> str:
    if HAVE_COMPILED:
        return "compiled-" + _core.simd_kind()
    return "fallback"

"""Hot kernels with a compiled backend and a pure numpy fallback.

The compiled module is used when it was built and ``CAUSIL_PURE`` is unset;
``BACKEND`` records which one was picked at import. Both expose
``simulate_categorical`` and ``rbf_gram``.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CAUSIL_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        _impl = _ckernels
        BACKEND = "cython"

simulate_categorical = _impl.simulate_categorical
rbf_gram = _impl.rbf_gram


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        return out
    out["cython"] = _ckernels
    return out

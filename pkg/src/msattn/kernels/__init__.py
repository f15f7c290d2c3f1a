"""Backend selection for the block-gather attention kernels.

The compiled extension is used when it imports; set ``MSATTN_BACKEND=python``
to force the numpy fallback (``compiled`` makes a missing extension an error).
"""
import os

from ..errors import InvalidConfig
from . import reference

try:
    from . import _block_attn as compiled
except ImportError:  # extension not built
    compiled = None

_BACKENDS = {"python": reference}
if compiled is not None:
    _BACKENDS["compiled"] = compiled


def available() -> bool:
    """True when the compiled extension imported."""
    return compiled is not None


def names():
    return sorted(_BACKENDS)


def get_backend(name=None):
    """Return the kernel module for ``name`` (None = the import-time default)."""
    if name is None:
        return DEFAULT
    try:
        return _BACKENDS[name]
    except KeyError:
        raise InvalidConfig(f"kernel backend {name!r} unavailable; have {names()}") from None


def _select_default():
    want = os.environ.get("MSATTN_BACKEND", "").strip().lower()
    if want == "python":
        return reference
    if want == "compiled":
        if compiled is None:
            raise ImportError("MSATTN_BACKEND=compiled but msattn.kernels._block_attn is not built")
        return compiled
    return compiled if compiled is not None else reference


DEFAULT = _select_default()
BACKEND = DEFAULT.NAME

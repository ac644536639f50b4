"""Kernel backend selection.

The compiled module is used when it imports cleanly; otherwise the NumPy
twins are used. Set ``MICROCORN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MICROCORN_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
causal_attn_fwd = _impl.causal_attn_fwd
causal_attn_bwd = _impl.causal_attn_bwd
xent_fwd = _impl.xent_fwd
xent_bwd = _impl.xent_bwd


def available_backends():
    """Map of backend name to kernel module, for benchmarks and tests."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["compiled"] = _ckernels
    except ImportError:
        pass
    return found

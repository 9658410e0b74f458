"""Hot kernels with a compiled core and a numpy fallback.

The compiled extension ``_core`` is used when it imports; otherwise (or when
``COGFACTOR_BACKEND=numpy`` is set) the pure numpy ``_fallback`` is used.
Both consume identical inputs, including pre-drawn random normals, so the
choice of backend never changes the random stream.
"""
import os
from types import ModuleType

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

KernelError = _fallback.KernelError
_KERNEL_ERRORS: tuple = (_fallback.KernelError,) + ((_core.KernelError,) if _core is not None else ())


def available_backends() -> list[str]:
    return ["numpy"] + (["cython"] if _core is not None else [])


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` ('cython', 'numpy' or None for default)."""
    if name is None:
        name = os.environ.get("COGFACTOR_BACKEND", "cython" if _core is not None else "numpy")
    if name == "cython":
        if _core is None:
            raise ImportError("compiled kernels are not built; reinstall with the Cython extension")
        return _core
    if name == "numpy":
        return _fallback
    raise ValueError(f"unknown backend {name!r}")


_active = get_backend()
BACKEND = "cython" if _active is _core else "numpy"


def ffbs_batch(*args):
    try:
        return _active.ffbs_batch(*args)
    except _KERNEL_ERRORS as exc:
        raise KernelError(str(exc)) from None


def cox_breslow(time, event, X, beta):
    return _active.cox_breslow(time, event, X, beta)

"""Backend selection for the row kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py``. Set ``DYNAMIXER_KERNELS=python`` to
force the fallback (``=cython`` makes a missing extension an ImportError).
"""
import contextlib
import os

from dynamixer import _kernels_py

_NAMES = (
    "softmax_lastdim",
    "softmax_lastdim_backward",
    "layer_norm",
    "layer_norm_backward",
    "gelu",
    "gelu_backward",
)

_BACKENDS = {"python": _kernels_py}
try:
    from dynamixer import _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None
else:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return tuple(_BACKENDS)


def _pick_default():
    requested = os.environ.get("DYNAMIXER_KERNELS", "").strip().lower()
    if requested == "python":
        return "python"
    if requested == "cython" and _ckernels is None:
        raise ImportError("DYNAMIXER_KERNELS=cython but dynamixer._ckernels is not built")
    return "cython" if _ckernels is not None else "python"


backend = None


def set_backend(name):
    global backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    module = _BACKENDS[name]
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(module, fn)
    backend = name


@contextlib.contextmanager
def use_backend(name):
    previous = backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


set_backend(_pick_default())

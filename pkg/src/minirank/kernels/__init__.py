"""Kernel backend selection for the encoder's hot inner loops.

At import time the compiled Cython backend (``_ckernels``) is used when
available, falling back to the NumPy implementation otherwise. Set the
environment variable ``MINIRANK_BACKEND`` to ``c`` or ``py`` to force one
(forcing ``c`` without the extension built raises). ``set_backend`` swaps
the implementation at runtime; it exists for the parity tests and the
benchmark, normal code never needs it.
"""

import os

from . import pykernels

_BACKENDS = {"py": pykernels}
try:
    from . import _ckernels

    _BACKENDS["c"] = _ckernels
except ImportError:
    pass

_FUNCS = (
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "masked_softmax_forward",
    "masked_softmax_backward",
)

BACKEND = ""


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}"
        )
    module = _BACKENDS[name]
    for func in _FUNCS:
        globals()[func] = getattr(module, func)
    BACKEND = name


_forced = os.environ.get("MINIRANK_BACKEND")
if _forced:
    set_backend(_forced)
else:
    set_backend("c" if "c" in _BACKENDS else "py")

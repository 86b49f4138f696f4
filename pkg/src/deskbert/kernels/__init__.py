"""Attention kernel backends.

The compiled extension (``_attention``, built from Cython) is selected at
import when available; otherwise the pure-NumPy reference implementation is
used. Set ``DESKBERT_KERNELS=python`` or ``=cython`` to force a backend, or
call :func:`use_backend` at runtime (the benchmark does this to compare
them). Both backends implement the same contract and agree to float
rounding.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _attention as _compiled
except ImportError:  # extension not built; pure python still works
    _compiled = None

_BACKENDS = {"python": reference}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled


def _initial_backend():
    forced = os.environ.get("DESKBERT_KERNELS", "auto").lower()
    if forced == "auto":
        return _compiled if _compiled is not None else reference
    if forced not in _BACKENDS:
        raise ImportError(
            f"DESKBERT_KERNELS={forced!r} but available backends are {sorted(_BACKENDS)}"
        )
    return _BACKENDS[forced]


_active = _initial_backend()


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return "cython" if _compiled is not None and _active is _compiled else "python"


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previously active name."""
    global _active
    if name not in _BACKENDS:
        raise ImportError(f"backend {name!r} not available; have {sorted(_BACKENDS)}")
    previous = backend_name()
    _active = _BACKENDS[name]
    return previous


def attend_fwd(q, k, v, cu_seqlens, half_window, scale):
    return _active.attend_fwd(q, k, v, cu_seqlens, half_window, scale)


def attend_bwd(q, k, v, out, d_out, lse, cu_seqlens, half_window, scale):
    return _active.attend_bwd(q, k, v, out, d_out, lse, cu_seqlens, half_window, scale)

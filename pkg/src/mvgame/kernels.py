"""Backend selection for the path-simulation kernel.

The compiled extension ``mvgame._ckernels`` is used when it imports; the
numpy implementation in ``mvgame._pykernels`` is the fallback. Both follow
the same arithmetic, step by step.
"""
from __future__ import annotations

from . import _pykernels

try:  # pragma: no cover - depends on the build
    from . import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

AVAILABLE = ("cython", "numpy") if _ckernels is not None else ("numpy",)
_default = AVAILABLE[0]


def get_backend() -> str:
    return _default


def set_backend(name: str) -> None:
    """Select the default backend (``"cython"`` or ``"numpy"``)."""
    global _default
    if name not in AVAILABLE:
        raise ValueError(f"backend {name!r} not available; have {AVAILABLE}")
    _default = name


def run_paths(kin, dW, c1, c2, oc1, oc2, u1_full=None, u1_exo=None, u2_full=None,
              record=0, path_offset=0, backend=None):
    name = backend or _default
    if name == "cython":
        if _ckernels is None:
            raise ValueError("cython backend not built")
        return _ckernels.run_paths(kin, dW, c1, c2, oc1, oc2, u1_full, u1_exo, u2_full,
                                   record, path_offset)
    if name != "numpy":
        raise ValueError(f"unknown backend {name!r}")
    return _pykernels.run_paths(kin, dW, c1, c2, oc1, oc2, u1_full, u1_exo, u2_full,
                                record, path_offset)

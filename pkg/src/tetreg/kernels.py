"""Backend selection for the per-element kernels.

The compiled extension (tetreg._core) is used when it imported successfully;
otherwise, or when TETREG_PURE_PYTHON is set, the numpy implementation takes
over. Both expose the same functions and agree to floating-point tolerance;
see benchmarks/bench_kernels.py for the speed comparison.
"""

from __future__ import annotations

import os

import numpy as np

from . import _core_np

try:
    from . import _core
except ImportError:  # pragma: no cover - depends on the build
    _core = None

_FORCE_PURE = bool(os.environ.get("TETREG_PURE_PYTHON"))
_backend = _core_np if (_core is None or _FORCE_PURE) else _core

HAVE_COMPILED = _core is not None


def backend_name() -> str:
    return "numpy" if _backend is _core_np else "compiled"


def get_backend(name: str):
    if name == "numpy":
        return _core_np
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernel extension is not available")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def _prep(nodes, tets):
    return (
        np.ascontiguousarray(nodes, dtype=np.float64),
        np.ascontiguousarray(tets, dtype=np.int64),
    )


def tet_volumes(nodes, tets):
    return _backend.tet_volumes(*_prep(nodes, tets))


def assembly_triplets(nodes, tets, lam: float, mu: float):
    nodes, tets = _prep(nodes, tets)
    return _backend.assembly_triplets(nodes, tets, float(lam), float(mu))


def jacobian_dets(nodes, tets, u):
    nodes, tets = _prep(nodes, tets)
    u = np.ascontiguousarray(u, dtype=np.float64)
    return _backend.jacobian_dets(nodes, tets, u)

"""Hot per-step particle kernels, with numba and pure-numpy backends.

The backend is chosen once at import time from the ``TABLEWIPE_BACKEND``
environment variable (``numba`` or ``numpy``). Default is numba when it
imports cleanly, otherwise numpy. Both backends perform the same floating
point operations in the same order, so results are bit-identical; the
benchmark in benchmarks/bench_sde.py compares their throughput.
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple

import numpy as np

ENV_VAR = "TABLEWIPE_BACKEND"


def _contact_mask_numpy(xs, ys, wiped, cx, cy, ct, st, half_along, half_perp, w, h, out):
    rx = xs - cx
    ry = ys - cy
    lx = ct * rx + st * ry
    ly = -st * rx + ct * ry
    np.logical_and(wiped == 0, (xs >= 0.0) & (xs <= w), out=out)
    out &= (ys >= 0.0) & (ys <= h)
    out &= (lx >= -half_along) & (lx <= half_along)
    out &= (ly >= -half_perp) & (ly <= half_perp)
    return int(np.count_nonzero(out))


def _apply_step_numpy(xs, ys, wiped, idx, drift_x, drift_y, ct, st, diff, p_absorb, normals, uniforms):
    n1 = normals[:, 0]
    n2 = normals[:, 1]
    xs[idx] = xs[idx] + drift_x + diff * (ct * n1 - st * n2)
    ys[idx] = ys[idx] + drift_y + diff * (st * n1 + ct * n2)
    wiped[idx[uniforms < p_absorb]] = 1


def _contact_mask_py(xs, ys, wiped, cx, cy, ct, st, half_along, half_perp, w, h, out):
    n = 0
    for i in range(xs.shape[0]):
        m = False
        if wiped[i] == 0 and 0.0 <= xs[i] <= w and 0.0 <= ys[i] <= h:
            rx = xs[i] - cx
            ry = ys[i] - cy
            lx = ct * rx + st * ry
            ly = -st * rx + ct * ry
            m = (-half_along <= lx <= half_along) and (-half_perp <= ly <= half_perp)
        out[i] = m
        if m:
            n += 1
    return n


def _apply_step_py(xs, ys, wiped, idx, drift_x, drift_y, ct, st, diff, p_absorb, normals, uniforms):
    for k in range(idx.shape[0]):
        i = idx[k]
        n1 = normals[k, 0]
        n2 = normals[k, 1]
        xs[i] = xs[i] + drift_x + diff * (ct * n1 - st * n2)
        ys[i] = ys[i] + drift_y + diff * (st * n1 + ct * n2)
        if uniforms[k] < p_absorb:
            wiped[i] = 1


class Kernels(NamedTuple):
    name: str
    contact_mask: Callable
    apply_step: Callable


_NUMPY = Kernels("numpy", _contact_mask_numpy, _apply_step_numpy)
_NUMBA: Kernels | None = None


def _build_numba() -> Kernels:
    global _NUMBA
    if _NUMBA is None:
        import numba

        # fastmath stays off: fused multiply-adds would break bit-parity
        # with the numpy backend.
        contact = numba.njit(cache=True)(_contact_mask_py)
        apply = numba.njit(cache=True)(_apply_step_py)
        _NUMBA = Kernels("numba", contact, apply)
    return _NUMBA


def get_backend(name: str | None = None) -> Kernels:
    """Return the kernel set for `name`, or the environment-selected default."""
    if name is None:
        name = os.environ.get(ENV_VAR, "").strip().lower() or "numba"
    if name == "numpy":
        return _NUMPY
    if name == "numba":
        try:
            return _build_numba()
        except ImportError:
            return _NUMPY
    raise ValueError(f"unknown kernel backend {name!r} (expected 'numba' or 'numpy')")


DEFAULT = get_backend()

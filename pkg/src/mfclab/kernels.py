"""Backend selection for the hot numerical kernels.

The compiled extension ``mfclab._ext`` is used when it imports; otherwise the
pure-numpy reference in ``mfclab._kernels_py`` takes over. Set
``MFCLAB_BACKEND=python`` (or ``compiled``) to force a choice.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

from . import _kernels_py as _py

try:  # pragma: no cover - depends on the build
    from . import _ext as _compiled
except ImportError:  # pragma: no cover
    _compiled = None


@dataclass(frozen=True)
class Backend:
    name: str
    tridiag_factor: Callable
    tridiag_solve: Callable
    forward_march: Callable
    backward_march: Callable
    quantile_wasserstein: Callable
    particle_march: Callable

    def diffuse(self, values, factor, ndim):
        return _py.diffuse(values, factor, ndim, self.tridiag_solve)

    def forward_march_nd(self, rho0, alpha, weights, dx, dt, factor, source=None):
        if alpha.shape[-1] == 1 and rho0.ndim == 2:
            return self.forward_march(rho0, alpha[..., 0], weights, dx, dt, factor, source)
        return _py.forward_march_nd(rho0, alpha, weights, dx, dt, factor, source, self.tridiag_solve)

    def backward_march_nd(self, terminal, alpha, dx, dt, factor, source=None):
        if alpha.shape[-1] == 1 and terminal.ndim == 2:
            return self.backward_march(terminal, alpha[..., 0], dx, dt, factor, source)
        return _py.backward_march_nd(terminal, alpha, dx, dt, factor, source, self.tridiag_solve)


def _make(mod, name: str) -> Backend:
    return Backend(
        name=name,
        tridiag_factor=mod.tridiag_factor,
        tridiag_solve=mod.tridiag_solve,
        forward_march=mod.forward_march,
        backward_march=mod.backward_march,
        quantile_wasserstein=mod.quantile_wasserstein,
        particle_march=mod.particle_march,
    )


PYTHON = _make(_py, "python")
COMPILED = _make(_compiled, "compiled") if _compiled is not None else None


def available() -> list[str]:
    return ["python"] + (["compiled"] if COMPILED is not None else [])


def get_backend(name: str | None = None) -> Backend:
    """Return the named backend, or the active one when ``name`` is None."""
    if name is None:
        return _active
    if name == "python":
        return PYTHON
    if name == "compiled":
        if COMPILED is None:
            raise ImportError("compiled kernels are not built; reinstall with Cython available")
        return COMPILED
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name: str) -> Backend:
    """Switch the process-wide backend (used by benchmarks and parity tests)."""
    global _active
    _active = get_backend(name)
    return _active


def _initial() -> Backend:
    choice = os.environ.get("MFCLAB_BACKEND", "auto").lower()
    if choice == "auto":
        return COMPILED if COMPILED is not None else PYTHON
    return get_backend(choice)


_active = _initial()

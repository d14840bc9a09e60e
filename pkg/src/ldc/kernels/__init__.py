"""Numeric kernel backend selection.

Two interchangeable backends implement the hot kernels:

* ``_core`` — Cython extension built at install time (default when present);
* ``_purepy`` — NumPy fallback, always available.

``LDC_BACKEND`` picks one explicitly: ``auto`` (default), ``cython``, or
``numpy``. ``cython`` raises if the extension was not built. Both backends
are deterministic run-to-run; they may differ from each other in the last
bits of floating point (different summation order), so cross-backend tests
compare with tolerances, not bit equality.
"""

import os

from . import _purepy

_requested = os.environ.get("LDC_BACKEND", "auto").lower()

if _requested not in ("auto", "cython", "numpy"):
    raise ImportError(
        f"LDC_BACKEND={_requested!r} not understood (expected auto, cython, or numpy)"
    )

_impl = None
if _requested in ("auto", "cython"):
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "LDC_BACKEND=cython but the compiled extension ldc.kernels._core "
                "is not importable; reinstall the package to build it"
            ) from None

if _impl is None:
    _impl = _purepy

BACKEND = "cython" if _impl is not _purepy else "numpy"

linear_forward = _impl.linear_forward
linear_backward = _impl.linear_backward
relu = _impl.relu
relu_backward = _impl.relu_backward
sigmoid = _impl.sigmoid
softmax_rows = _impl.softmax_rows
cross_entropy_rows = _impl.cross_entropy_rows
prob_nll_rows = _impl.prob_nll_rows
l1_rows = _impl.l1_rows
adamw_update = _impl.adamw_update


def available_backends():
    """Names of the backends importable in this environment."""
    names = ["numpy"]
    try:
        from . import _core  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Return the backend module for ``name`` ("numpy" or "cython")."""
    if name == "numpy":
        return _purepy
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")

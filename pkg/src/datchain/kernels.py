"""Kernel backend selection.

Imports the compiled extension when available, otherwise the pure-Python
twin. Set DATCHAIN_PURE_PY=1 to force the fallback (the benchmark uses
this to compare both paths).
"""

from __future__ import annotations

import os

from datchain import _kernels_py

if os.environ.get("DATCHAIN_PURE_PY") == "1":
    _impl = _kernels_py
else:
    try:
        from datchain import _kernels_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
Xoshiro256 = _impl.Xoshiro256
leading_zero_bits = _impl.leading_zero_bits
pow_search = _impl.pow_search


def available_backends() -> dict[str, object]:
    """Importable kernel modules keyed by backend name."""
    backends: dict[str, object] = {_kernels_py.BACKEND: _kernels_py}
    try:
        from datchain import _kernels_cy

        backends[_kernels_cy.BACKEND] = _kernels_cy
    except ImportError:
        pass
    return backends

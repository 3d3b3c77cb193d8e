"""Hot-loop kernels with a compiled core and a numpy fallback.

The backend is picked once at import: the Cython extension if it was built,
otherwise the numpy implementation. Set CLIF_KERNELS=python or
CLIF_KERNELS=compiled to force a backend (forcing "compiled" raises if the
extension is unavailable). benchmarks/bench_kernels.py compares the two.
"""

import os

_forced = os.environ.get("CLIF_KERNELS", "").strip().lower()

if _forced == "python":
    from . import pykernels as impl
elif _forced in ("compiled", "c"):
    from . import _core as impl  # noqa: F401  (ImportError is the intended failure)
elif _forced:
    raise ValueError(f"CLIF_KERNELS must be 'python' or 'compiled', got {_forced!r}")
else:
    try:
        from . import _core as impl
    except ImportError:
        from . import pykernels as impl

BACKEND = impl.BACKEND
CLAMP_LOGP = impl.CLAMP_LOGP
adam_update = impl.adam_update
tanh_grad = impl.tanh_grad
relu_grad = impl.relu_grad
squared_distance = impl.squared_distance
squared_distance_grad = impl.squared_distance_grad
softmax_xent = impl.softmax_xent

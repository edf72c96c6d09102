"""Kernel backend selection.

The compiled extension is preferred when present; set KNOWSURV_PURE_PYTHON=1
to force the numpy fallback (used by the benchmark and parity tests).
"""

import os

from . import numpy_ref

if os.environ.get("KNOWSURV_PURE_PYTHON"):
    impl = numpy_ref
else:
    try:
        from . import _core as impl  # type: ignore[attr-defined]
    except ImportError:
        impl = numpy_ref

BACKEND = impl.BACKEND

attention_probs_fwd = impl.attention_probs_fwd
attention_probs_bwd = impl.attention_probs_bwd
layernorm_fwd = impl.layernorm_fwd
layernorm_bwd = impl.layernorm_bwd
rownorm_fwd = impl.rownorm_fwd
rownorm_bwd = impl.rownorm_bwd

"""Few-step rectified-flow distillation lab on synthetic 2D distributions."""

import os

__version__ = "0.1.0"

# The work units here are small matrices; multi-threaded BLAS loses more to
# synchronization than it gains.  Override with FLOWLAB_BLAS_THREADS.
try:
    from threadpoolctl import threadpool_limits as _limits

    _limits(int(os.environ.get("FLOWLAB_BLAS_THREADS", "1")), "blas")
except Exception:  # pragma: no cover - best effort
    pass

from . import adversarial, autodiff, distill, flow, metrics, models, optim, \
    rng, teacher  # noqa: F401,E402

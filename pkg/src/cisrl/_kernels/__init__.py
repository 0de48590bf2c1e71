"""Hot-loop backends: compiled extension when available, pure Python otherwise.

Set CISRL_PURE_PYTHON=1 to force the fallback (used by the backend-parity
tests and the benchmark). `BACKEND` names the selected implementation.
"""
import os

if os.environ.get("CISRL_PURE_PYTHON"):
    from . import _pyfallback as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _pyfallback as _impl

        BACKEND = "python"

OIS = _impl.OIS
PDIS = _impl.PDIS
UNCORRECTED = _impl.UNCORRECTED
RCIS = _impl.RCIS
SCIS = _impl.SCIS
REWARD_CIS = _impl.REWARD_CIS
ANALYTIC = _impl.ANALYTIC
ORACLE = _impl.ORACLE
ONLINE = _impl.ONLINE

sample_paths = _impl.sample_paths
operator_estimates = _impl.operator_estimates
sample_episode_batch = _impl.sample_episode_batch
learning_run = _impl.learning_run

"""Multi-task learning with kernel-eigenvalue task balancing.

Submodules: ``linalg`` (symmetric eigen-solvers), ``net`` (shared-trunk MLP
with manual backprop), ``ntk`` (per-task and extended kernels), ``weighting``
(LS, SI, RLW, DWA, NTKMTL, NTKMTL_SR), ``trainer``, ``dynamics``
(frozen-kernel checks), ``bench`` (synthetic tasks and metrics), ``runio``
(archives), ``config`` and ``cli``.
"""

__version__ = "0.1.0"

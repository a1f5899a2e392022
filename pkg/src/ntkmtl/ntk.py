"""Per-task and extended neural tangent kernels, and the eigenvalue-balancing
task weights derived from them.

Two granularities are supported.  ``PER_SAMPLE`` kernels have one row per
(sample, output coordinate), built from output Jacobians.  ``per_minibatch(n)``
kernels are n x n Gram matrices of the gradients of each mini-batch's mean
task loss; that is the cheap estimator the training strategies use.
"""

from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import InputValidationError, NumericalError
from .net import (
    TaskBatch,
    backward_head,
    backward_trunk,
    forward,
    jacobian_repr,
    jacobian_shared,
    loss_output_grad,
)

FLOOR_REL = 1e-12


@dataclass(frozen=True)
class Granularity:
    kind: str
    n: int = 1

    def __post_init__(self):
        if self.kind not in ("per_sample", "per_minibatch"):
            raise InputValidationError(f"unknown granularity {self.kind!r}")
        if self.n < 1:
            raise InputValidationError("mini-batch count n must be >= 1")


PER_SAMPLE = Granularity("per_sample")


def per_minibatch(n):
    return Granularity("per_minibatch", int(n))


def rebatch(batch, n):
    """Same data split into ``n`` mini-batches (trailing samples dropped)."""
    if batch.n_minibatches == n:
        return batch
    return TaskBatch(batch.inputs, batch.targets, n, batch.error_scales)


def _dz(net, trace, batch, task_id):
    _, dz = backward_head(net, trace, task_id, loss_output_grad(trace, batch, task_id))
    return dz


def shared_rows(net, batch, task_id, gran, trace=None):
    """Rows whose Gram matrix is the task's kernel over theta."""
    if gran.kind == "per_sample":
        return jacobian_shared(net, batch.inputs, task_id)
    batch = rebatch(batch, gran.n)
    trace = trace if trace is not None and trace.inputs.shape[0] == batch.size else forward(net, batch.inputs)
    return backward_trunk(net, trace, _dz(net, trace, batch, task_id) * gran.n, groups=gran.n)


def repr_rows_from_dz(dz, n):
    """Per-mini-batch gradients w.r.t. each mini-batch's concatenated z.

    ``dz`` is d(full-batch mean loss)/dz, shape (m, repr_dim).  A mini-batch
    of m/n samples has mean loss n/m * sum, so its gradient is ``n * dz``
    restricted to its rows, flattened sample-major.
    """
    m, r = dz.shape
    return (dz * n).reshape(n, (m // n) * r)


def repr_rows(net, batch, task_id, gran, trace=None):
    """Rows whose Gram matrix is the task's kernel over the shared representation."""
    if gran.kind == "per_sample":
        return jacobian_repr(net, batch.inputs, task_id)
    batch = rebatch(batch, gran.n)
    trace = trace if trace is not None and trace.inputs.shape[0] == batch.size else forward(net, batch.inputs)
    return repr_rows_from_dz(_dz(net, trace, batch, task_id), gran.n)


def task_ntk(net, batch, task_id, gran):
    return linalg.gram(shared_rows(net, batch, task_id, gran))


def sr_task_ntk(net, batch, task_id, gran):
    return linalg.gram(repr_rows(net, batch, task_id, gran))


@dataclass
class ExtendedNtk:
    k: int
    blocks: list  # blocks[i][j] = K_ij
    assembled: np.ndarray
    sizes: list

    def weighted(self, omegas):
        """``omega omega^T (.) K`` applied blockwise."""
        w = np.repeat(np.asarray(omegas, dtype=np.float64), self.sizes)
        return self.assembled * np.outer(w, w)


def _assemble(row_blocks):
    stacked = np.vstack(row_blocks)
    K = linalg.gram(stacked)
    sizes = [r.shape[0] for r in row_blocks]
    edges = np.cumsum([0] + sizes)
    blocks = [
        [K[edges[i] : edges[i + 1], edges[j] : edges[j + 1]] for j in range(len(sizes))]
        for i in range(len(sizes))
    ]
    return ExtendedNtk(len(sizes), blocks, K, sizes)


def extended_ntk(net, batch, gran):
    rows = [shared_rows(net, batch, t, gran) for t in range(net.k)]
    return _assemble(rows)


def sr_extended_ntk(net, batch, gran):
    rows = [repr_rows(net, batch, t, gran) for t in range(net.k)]
    return _assemble(rows)


@dataclass
class NtkSummary:
    lambdas: np.ndarray  # floored per-task max eigenvalues
    lambda_bar: float
    omegas: np.ndarray
    floored: np.ndarray  # bool mask of tasks clamped to the floor


def omegas_from_lambdas(raw, floor_rel=FLOOR_REL):
    """omega_i = sqrt(mean(lambda) / lambda_i), with lambdas clamped below.

    The floor is ``floor_rel * max(1, mean of the unclamped lambdas)``.  When
    every kernel is zero all lambdas sit on the floor and all weights are 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 1:
        raise InputValidationError("need at least one eigenvalue")
    if floor_rel <= 0:
        raise InputValidationError("floor must be positive")
    floor = floor_rel * max(1.0, float(np.mean(raw)))
    floored = raw < floor
    lambdas = np.where(floored, floor, raw)
    lambda_bar = float(np.sum(lambdas) / lambdas.size)
    omegas = np.sqrt(lambda_bar / lambdas)
    return NtkSummary(lambdas, lambda_bar, omegas, floored)


def max_eigs(ntks, tol=1e-10, max_iters=10_000):
    """Largest eigenvalue of each kernel, batching equal-sized ones.

    ``ntks`` is a list of square matrices or a (k, n, n) stack.  A
    near-degenerate top pair can keep power iteration from settling within
    ``max_iters``; that stack then falls back to the Jacobi solver.
    """

    def solve(stack):
        if stack.shape[1] == 1:
            return stack[:, 0, 0]
        try:
            return linalg.max_eigenvalues(stack, tol, max_iters, vectors=False)[0]
        except NumericalError:
            return np.array([linalg.sym_eig(K).eigenvalues[0] for K in stack])

    if isinstance(ntks, np.ndarray) and ntks.ndim == 3:
        return solve(np.asarray(ntks, dtype=np.float64))
    ntks = [np.asarray(K, dtype=np.float64) for K in ntks]
    out = np.empty(len(ntks))
    by_dim = {}
    for i, K in enumerate(ntks):
        by_dim.setdefault(K.shape[0], []).append(i)
    for idx in by_dim.values():
        out[idx] = solve(np.stack([ntks[i] for i in idx]))
    return out


def summarize(ntks, floor_rel=FLOOR_REL):
    """Balance weights from per-task kernels (max eigenvalue of each)."""
    if len(ntks) < 1:
        raise InputValidationError("need at least one kernel")
    return omegas_from_lambdas(max_eigs(ntks), floor_rel)


def gram_stack(rows):
    """Gram matrices of a (k, n, D) stack of row blocks, exactly symmetric."""
    G = np.matmul(rows, rows.transpose(0, 2, 1))
    return 0.5 * (G + G.transpose(0, 2, 1))

"""Task-weighting strategies and the parameter update they drive.

``LS``, ``SI``, ``RLW`` and ``DWA`` scale the per-task losses and backprop
once.  ``NTKMTL`` balances the largest eigenvalue of each task's kernel over
the shared parameters and combines per-task shared gradients; ``NTKMTL_SR``
does the same with kernels over the shared representation and then backprops
the weighted loss once.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ntk as ntk_mod
from .errors import InputValidationError, PoisonedRunError
from .net import backward_head, backward_trunk, forward, loss_output_grad, task_loss

STRATEGIES = ("LS", "SI", "RLW", "DWA", "NTKMTL", "NTKMTL_SR")
DEFAULT_N = {"NTKMTL": 1, "NTKMTL_SR": 4}
SI_EPS = 1e-12

WEIGHTED_GRADIENT_SUM = "weighted_gradient_sum"
WEIGHTED_LOSS_BACKPROP = "weighted_loss_backprop"


@dataclass(frozen=True)
class Strategy:
    """Strategy kind plus its hyperparameters.

    ``ema`` is an optional exponential smoothing coefficient for the NTK
    weights (0 = off, the default; weights are then recomputed from scratch
    every iteration).
    """

    name: str = "LS"
    n: int = None
    temperature: float = 2.0
    ema: float = 0.0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise InputValidationError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")
        if self.n is None:
            object.__setattr__(self, "n", DEFAULT_N.get(self.name, 1))
        if self.n < 1:
            raise InputValidationError("n must be >= 1")
        if not self.temperature > 0:
            raise InputValidationError("temperature must be > 0")
        if not 0.0 <= self.ema < 1.0:
            raise InputValidationError("ema must lie in [0, 1)")

    @property
    def uses_ntk(self):
        return self.name in ("NTKMTL", "NTKMTL_SR")

    @property
    def minibatches(self):
        return self.n if self.uses_ntk else 1


@dataclass
class WeightState:
    strategy: Strategy
    seed: int = 0
    loss_history: deque = field(default_factory=lambda: deque(maxlen=2))
    rng: np.random.Generator = None
    last_summary: object = None
    smoothed: np.ndarray = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2]))


@dataclass
class StepCache:
    """Forward pass plus each task's head backprop for one batch."""

    trace: object
    losses: np.ndarray
    head_grads: list
    dz: np.ndarray  # d loss_i / d z stacked over tasks, (k, m, repr_dim)


def task_backprop(net, batch, trace=None):
    trace = trace if trace is not None else forward(net, batch.inputs)
    losses, hgs, dzs = [], [], []
    for t in range(net.k):
        losses.append(task_loss(trace, batch, t))
        hg, dz = backward_head(net, trace, t, loss_output_grad(trace, batch, t))
        hgs.append(hg)
        dzs.append(dz)
    return StepCache(trace, np.array(losses), hgs, np.stack(dzs))


@dataclass
class UpdateDirective:
    mode: str
    omegas: np.ndarray
    shared_grads: np.ndarray = None  # (k, |theta|), weighted_gradient_sum only
    summary: object = None
    cache: StepCache = None


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def ntkmtl_shared_grads(net, batch, cache, n):
    """Per-task mini-batch gradient blocks (k, n, |theta|) over theta."""
    return np.stack(
        [backward_trunk(net, cache.trace, dz * n, groups=n) for dz in cache.dz]
    )


def sr_rows(cache, n):
    """(k, n, (m/n) * repr_dim) per-mini-batch gradients over z, all tasks at once."""
    k, m, r = cache.dz.shape
    return (cache.dz * n).reshape(k, n, (m // n) * r)


def _summary_from_rows(rows):
    G = ntk_mod.gram_stack(rows)
    if not np.all(np.isfinite(G)):
        raise PoisonedRunError("non-finite kernel entries")
    return ntk_mod.omegas_from_lambdas(ntk_mod.max_eigs(G))


def compute_weights(state, net, batch, losses=None, cache=None):
    """Weights for this iteration and how to apply them."""
    strat = state.strategy
    if cache is None:
        cache = task_backprop(net, batch)
    losses = cache.losses if losses is None else np.asarray(losses, dtype=np.float64)
    if not np.all(np.isfinite(losses)):
        raise PoisonedRunError(f"non-finite task loss {losses.tolist()}")
    if np.any(losses < 0):
        raise InputValidationError("losses must be non-negative")
    k = losses.size
    grads = None
    summary = None
    mode = WEIGHTED_LOSS_BACKPROP

    if strat.name == "LS":
        omegas = np.ones(k)
    elif strat.name == "SI":
        omegas = 1.0 / np.maximum(losses, SI_EPS)
    elif strat.name == "RLW":
        omegas = k * _softmax(state.rng.standard_normal(k))
    elif strat.name == "DWA":
        hist = state.loss_history
        if len(hist) < 2:
            omegas = np.ones(k)
        else:
            r = hist[-1] / np.maximum(hist[-2], SI_EPS)
            omegas = k * _softmax(r / strat.temperature)
        hist.append(losses.copy())
    elif strat.name == "NTKMTL":
        if batch.n_minibatches != strat.n:
            raise InputValidationError("batch must be split into strategy.n mini-batches")
        blocks = ntkmtl_shared_grads(net, batch, cache, strat.n)
        summary = _summary_from_rows(blocks)
        grads = blocks.mean(axis=1) if strat.n > 1 else blocks[:, 0, :]
        omegas = summary.omegas
        mode = WEIGHTED_GRADIENT_SUM
    else:  # NTKMTL_SR
        if batch.n_minibatches != strat.n:
            raise InputValidationError("batch must be split into strategy.n mini-batches")
        summary = _summary_from_rows(sr_rows(cache, strat.n))
        omegas = summary.omegas

    if strat.uses_ntk:
        if strat.ema > 0 and state.smoothed is not None:
            omegas = strat.ema * state.smoothed + (1.0 - strat.ema) * omegas
        state.smoothed = omegas
        state.last_summary = summary
    if not np.all(np.isfinite(omegas)):
        raise PoisonedRunError(f"non-finite weights {omegas.tolist()}")
    return UpdateDirective(mode, np.asarray(omegas, dtype=np.float64), grads, summary, cache)


def weighted_sum(omegas, vectors):
    """sum_i omega_i v_i accumulated in task order."""
    out = omegas[0] * vectors[0]
    for w, v in zip(omegas[1:], vectors[1:]):
        out = out + w * v
    return out


def apply_update(directive, net, batch, lr):
    """One SGD step; updates ``net`` in place and returns it.

    ``weighted_gradient_sum``: theta -= lr * sum_i omega_i g_i, each head
    steps along its own unweighted gradient.  ``weighted_loss_backprop``: one
    backprop of sum_i omega_i loss_i moves theta and every head.
    """
    if not lr > 0:
        raise InputValidationError("lr must be > 0")
    cache = directive.cache if directive.cache is not None else task_backprop(net, batch)
    w = directive.omegas
    if directive.mode == WEIGHTED_GRADIENT_SUM:
        grads = directive.shared_grads
        if grads is None:
            grads = [backward_trunk(net, cache.trace, dz) for dz in cache.dz]
        step = weighted_sum(w, grads)
        net.theta -= lr * step
        for hp, hg in zip(net.head_params, cache.head_grads):
            hp -= lr * hg
    elif directive.mode == WEIGHTED_LOSS_BACKPROP:
        dz = weighted_sum(w, cache.dz)
        step = backward_trunk(net, cache.trace, dz)
        net.theta -= lr * step
        for wi, hp, hg in zip(w, net.head_params, cache.head_grads):
            hp -= lr * (wi * hg)
    else:
        raise InputValidationError(f"unknown update mode {directive.mode!r}")
    return net

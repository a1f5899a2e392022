"""SGD training loop with pluggable task weighting, and an explicit-Euler
gradient-flow integrator for dynamics checks."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import ntk as ntk_mod
from .errors import InputValidationError, NumericalError, PoisonedRunError
from .net import (
    NetSpec,
    TaskBatch,
    backward_head,
    backward_trunk,
    forward,
    init,
    loss_output_grad,
    task_losses,
)
from .weighting import (
    Strategy,
    WeightState,
    _summary_from_rows,
    apply_update,
    compute_weights,
    ntkmtl_shared_grads,
    sr_rows,
    task_backprop,
)


@dataclass(frozen=True)
class TrainConfig:
    net_spec: NetSpec
    strategy: Strategy = field(default_factory=Strategy)
    lr: float = 0.05
    iterations: int = 1000
    batch_size: int = 64
    record_every: int = 10
    eig_record_every: int = 100
    seed: int = 0
    diag_estimator: str = "sr"  # "sr" or "full": kernel used for baseline diagnostics
    diag_n: int = 4

    def __post_init__(self):
        if not self.lr > 0:
            raise InputValidationError("lr must be > 0")
        if self.iterations < 1:
            raise InputValidationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise InputValidationError("batch_size must be >= 1")
        if self.record_every < 1 or self.eig_record_every < 1:
            raise InputValidationError("record cadences must be >= 1")
        if self.diag_estimator not in ("sr", "full"):
            raise InputValidationError("diag_estimator must be 'sr' or 'full'")
        if self.diag_n < 1:
            raise InputValidationError("diag_n must be >= 1")


@dataclass
class Dataset:
    """Train/test split with aligned per-task targets."""

    x_train: np.ndarray
    y_train: list
    x_test: np.ndarray
    y_test: list
    error_scales: np.ndarray = None

    def __post_init__(self):
        if self.error_scales is None:
            self.error_scales = np.ones(len(self.y_train))
        self.error_scales = np.asarray(self.error_scales, dtype=np.float64)

    @property
    def k(self):
        return len(self.y_train)

    def task(self, i):
        """Single-task view of task ``i``."""
        return Dataset(
            self.x_train, [self.y_train[i]], self.x_test, [self.y_test[i]], self.error_scales[[i]]
        )

    def train_batch(self, n=1):
        return TaskBatch(self.x_train, self.y_train, n, self.error_scales)

    def test_batch(self):
        return TaskBatch(self.x_test, self.y_test, 1, self.error_scales)


def _bits(a):
    return np.ascontiguousarray(a, dtype=np.float64).view(np.uint64)


@dataclass(eq=False)
class Row:
    iteration: int
    losses: np.ndarray
    omegas: np.ndarray
    lambdas: np.ndarray  # NaN where not recorded at this iteration
    wall_time: float

    def __eq__(self, other):
        # bit-pattern equality, so NaN placeholders compare equal to themselves
        if not isinstance(other, Row):
            return NotImplemented
        return self.iteration == other.iteration and all(
            np.array_equal(_bits(getattr(self, f)), _bits(getattr(other, f)))
            for f in ("losses", "omegas", "lambdas", "wall_time")
        )


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    valid: bool = True
    data: object = None  # generator spec, when the dataset came from one
    net: object = field(default=None, compare=False, repr=False)  # trained net, not archived

    @property
    def k(self):
        return self.config.net_spec.k


class _Sampler:
    """Mini-batches without replacement; reshuffled each epoch from (seed, epoch)."""

    def __init__(self, m, batch_size, seed):
        self.m = m
        self.bs = min(batch_size, m)
        self.seed = seed
        self.epoch = -1
        self.perm = None
        self.pos = m

    def next(self):
        if self.pos + self.bs > self.m:
            self.epoch += 1
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 1, self.epoch]))
            self.perm = rng.permutation(self.m)
            self.pos = 0
        idx = self.perm[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


def diagnostic_lambdas(net, batch, cache, estimator="sr", n=4):
    """Per-task max eigenvalues for logging, independent of the active strategy."""
    n = max(1, min(n, batch.size))
    if batch.size % n:
        batch = ntk_mod.rebatch(batch, n)
        cache = task_backprop(net, batch)
    if estimator == "sr":
        rows = sr_rows(cache, n)
    else:
        rows = ntkmtl_shared_grads(net, batch, cache, n)
    return _summary_from_rows(rows).lambdas


def evaluate(net, x, ys, error_scales=None):
    b = TaskBatch(x, ys, 1, error_scales)
    return task_losses(forward(net, b.inputs), b)


def train(config, dataset, net=None, on_row=None):
    """Run ``config.iterations`` SGD steps and return the run record.

    ``on_row`` is called with each logged row as soon as it exists (used to
    stream the rows log to disk).  A non-finite loss raises
    ``PoisonedRunError`` carrying the partial record, flagged invalid.
    """
    spec = config.net_spec
    if dataset.k != spec.k:
        raise InputValidationError(f"dataset has {dataset.k} tasks, net has {spec.k} heads")
    net = init(spec) if net is None else net
    strat = config.strategy
    state = WeightState(strat, seed=config.seed)
    sampler = _Sampler(dataset.x_train.shape[0], config.batch_size, config.seed)
    record = RunRecord(config)
    k = spec.k
    nan = np.full(k, np.nan)
    t0 = time.perf_counter()
    last = config.iterations - 1
    for it in range(config.iterations):
        idx = sampler.next()
        batch = TaskBatch(
            dataset.x_train[idx],
            [y[idx] for y in dataset.y_train],
            strat.minibatches,
            dataset.error_scales,
        )
        cache = task_backprop(net, batch)
        if not np.all(np.isfinite(cache.losses)):
            record.valid = False
            raise PoisonedRunError(f"non-finite task loss at iteration {it}: {cache.losses.tolist()}", record)
        try:
            directive = compute_weights(state, net, batch, cache=cache)
        except PoisonedRunError as exc:
            record.valid = False
            exc.record = record
            raise
        want_eig = it % config.eig_record_every == 0
        if want_eig or it % config.record_every == 0 or it == last:
            if want_eig:
                lam = (
                    directive.summary.lambdas
                    if directive.summary is not None
                    else diagnostic_lambdas(net, batch, cache, config.diag_estimator, config.diag_n)
                )
            else:
                lam = nan
            row = Row(it, cache.losses.copy(), directive.omegas.copy(), np.array(lam, dtype=float),
                      time.perf_counter() - t0)
            record.rows.append(row)
            if on_row is not None:
                on_row(row)
        apply_update(directive, net, batch, config.lr)
    test = evaluate(net, dataset.x_test, dataset.y_test, dataset.error_scales)
    trn = evaluate(net, dataset.x_train, dataset.y_train, dataset.error_scales)
    if not (np.all(np.isfinite(test)) and np.all(np.isfinite(trn))):
        record.valid = False
        raise PoisonedRunError("non-finite final loss", record)
    record.final_metrics = {
        "test_loss": test.tolist(),
        "train_loss": trn.tolist(),
        "wall_time": time.perf_counter() - t0,
    }
    record.net = net
    return record


@dataclass
class FlowTrajectory:
    times: np.ndarray  # flow-time units (eta * t is the integration variable)
    outputs: np.ndarray  # (len(times), stacked output dim), task-major
    losses: np.ndarray  # (len(times), k)


def stacked_outputs(net, x):
    tr = forward(net, x)
    return np.concatenate([o.reshape(-1) for o in tr.outputs])


def gradient_flow(net, dataset, eta, t_end, dt, n_records=50, times=None, reduction="sum"):
    """Explicit-Euler integration of d theta / d tau = -grad L(theta), tau = eta * t.

    Only the shared parameters move; heads stay at their initial values so
    the flow matches the shared-parameter kernel.  Full-batch on the training
    split.  ``reduction="sum"`` flows on sum_i sum_u 1/2 |c_i e_iu|^2, whose
    output dynamics are driven by exactly J J^T; ``"mean"`` divides each task
    loss by the sample count as in training.  The recorded ``losses`` are
    always per-task means.  ``dt`` is the Euler step in tau and must not
    exceed ``eta``.
    Outputs are recorded at ``times`` (flow-time units, default
    ``n_records`` evenly spaced points on [0, t_end]).  The net is copied,
    not modified.
    """
    if not (eta > 0 and dt > 0 and t_end >= 0):
        raise InputValidationError("eta and dt must be > 0, t_end >= 0")
    if dt > eta:
        raise InputValidationError("dt must not exceed eta")
    if reduction not in ("sum", "mean"):
        raise InputValidationError("reduction must be 'sum' or 'mean'")
    net = net.copy()
    batch = dataset.train_batch()
    if times is None:
        times = np.linspace(0.0, t_end, n_records)
    times = np.asarray(times, dtype=np.float64)
    record_steps = np.rint(times * eta / dt).astype(np.int64)
    n_steps = int(record_steps.max()) if record_steps.size else 0
    mult = batch.size if reduction == "sum" else 1.0
    outs, losses = [], []
    ri = 0
    for step in range(n_steps + 1):
        tr = forward(net, batch.inputs)
        ls = task_losses(tr, batch)
        if not np.all(np.isfinite(ls)) or np.sum(ls) > 1e12:
            blow = step * dt / eta
            raise NumericalError(f"gradient flow diverged at t={blow:.6g}", residual=blow)
        while ri < len(record_steps) and record_steps[ri] == step:
            outs.append(np.concatenate([o.reshape(-1) for o in tr.outputs]))
            losses.append(ls)
            ri += 1
        if step == n_steps:
            break
        dz = None
        for t in range(net.k):
            _, d = backward_head(net, tr, t, loss_output_grad(tr, batch, t))
            dz = d if dz is None else dz + d
        net.theta -= (dt * mult) * backward_trunk(net, tr, dz)
    return FlowTrajectory(times, np.array(outs), np.array(losses))

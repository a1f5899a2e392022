"""Synthetic multi-task regression benchmarks, single-task baselines, and the
relative-drop / mean-rank summary metrics."""

import csv
import decimal
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import InputValidationError
from .net import HeadSpec
from .trainer import Dataset, TrainConfig, train
from .weighting import Strategy

KINDS = ("multifreq", "scalemix", "randlin")
# narrow enough that a width-64 tanh trunk starts out clearly biased toward
# the low-frequency targets, wide enough that the 7-cycle task is not trivial
DEFAULT_INPUT_RANGE = 0.2


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    multifreq: task i's target is ``sum_f amplitude * sin(2 pi f w_f.x)`` over
        its frequency set, with random unit directions ``w_f``.
    scalemix: every task shares one sine target; ``scales`` multiply each
        task's residual inside its loss.
    randlin: task i is ``A_i x`` for a random square matrix with condition
        number ``conditions[i]`` (vector-valued outputs).

    Inputs are uniform on ``[-input_range, input_range]^input_dim``.
    """

    kind: str = "multifreq"
    input_dim: int = 2
    samples: int = 512
    test_samples: int = 256
    noise_std: float = 0.01
    seed: int = 0
    frequencies: tuple = ((1,), (3,), (7,))
    amplitude: float = 1.0
    scales: tuple = (1.0, 100.0)
    conditions: tuple = (1.0, 10.0, 100.0)
    input_range: float = DEFAULT_INPUT_RANGE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputValidationError(f"unknown generator kind {self.kind!r}")
        if self.samples < 2 or self.test_samples < 1:
            raise InputValidationError("samples must be >= 2 and test_samples >= 1")
        if self.noise_std < 0:
            raise InputValidationError("noise_std must be >= 0")
        if self.input_dim < 1:
            raise InputValidationError("input_dim must be >= 1")
        object.__setattr__(
            self, "frequencies", tuple(tuple(float(f) for f in fs) for fs in self.frequencies)
        )
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "conditions", tuple(float(c) for c in self.conditions))

    @property
    def k(self):
        if self.kind == "multifreq":
            return len(self.frequencies)
        if self.kind == "scalemix":
            return len(self.scales)
        return len(self.conditions)

    @property
    def output_dims(self):
        return [self.input_dim if self.kind == "randlin" else 1] * self.k


def _unit(rng, d):
    w = rng.standard_normal(d)
    return w / np.linalg.norm(w)


def generate(spec):
    """Deterministic dataset from ``spec`` (train split of ``samples``, test split of ``test_samples``)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    d = spec.input_dim
    total = spec.samples + spec.test_samples
    x = rng.uniform(-spec.input_range, spec.input_range, size=(total, d))
    ys = []
    scales = np.ones(spec.k)
    if spec.kind == "multifreq":
        for freqs in spec.frequencies:
            y = np.zeros(total)
            for f in freqs:
                w = _unit(rng, d)
                y += spec.amplitude * np.sin(2 * np.pi * f * (x @ w))
            ys.append(y[:, None])
    elif spec.kind == "scalemix":
        w = _unit(rng, d)
        y = spec.amplitude * np.sin(2 * np.pi * (x @ w))
        ys = [y[:, None].copy() for _ in range(spec.k)]
        scales = np.array(spec.scales)
    else:
        for cond in spec.conditions:
            U, _ = np.linalg.qr(rng.standard_normal((d, d)))
            V, _ = np.linalg.qr(rng.standard_normal((d, d)))
            s = np.geomspace(1.0, 1.0 / cond, d)
            ys.append(x @ (U * s @ V.T).T)
    ys = [y + spec.noise_std * rng.standard_normal(y.shape) for y in ys]
    m = spec.samples
    return Dataset(x[:m], [y[:m] for y in ys], x[m:], [y[m:] for y in ys], scales)


def stl_baseline(dataset, train_cfg):
    """Held-out loss of one single-head net per task, trained under the same budget.

    Task i's net keeps the trunk of ``train_cfg.net_spec`` and its i-th head;
    the strategy is LS (the only meaningful choice with one task).
    """
    spec = train_cfg.net_spec
    out = []
    for i in range(dataset.k):
        single = replace(spec, heads=(spec.heads[i],))
        cfg = replace(train_cfg, net_spec=single, strategy=Strategy("LS"))
        rec = train(cfg, dataset.task(i))
        out.append(rec.final_metrics["test_loss"][0])
    return np.array(out)


def delta_m(m_method, m_base, higher_better):
    """Mean signed relative change vs the baseline, in percent.

    Positive means worse than the baseline.  A zero baseline entry is an
    error, not a silently guarded value.
    """
    mm = np.asarray(m_method, dtype=np.float64)
    mb = np.asarray(m_base, dtype=np.float64)
    hb = np.asarray(higher_better, dtype=bool)
    if not (mm.shape == mb.shape == hb.shape) or mm.ndim != 1 or mm.size == 0:
        raise InputValidationError("metric vectors must be 1-D and equally long")
    if np.any(mb == 0):
        raise InputValidationError("baseline metric is zero; relative change undefined")
    if not (np.all(np.isfinite(mm)) and np.all(np.isfinite(mb))):
        sign = np.where(hb, -1.0, 1.0)
        return float(np.mean(sign * (mm - mb) / mb) * 100.0)
    # metric tables are decimal numbers; reading each value at its shortest
    # repr keeps hand-computed examples exact (0.9 vs 1.0 is -10%, not
    # -9.999999999999998%) and is within an ulp of the float formula otherwise
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        total = decimal.Decimal(0)
        for a, b, h in zip(mm, mb, hb):
            da, db = decimal.Decimal(repr(float(a))), decimal.Decimal(repr(float(b)))
            r = (da - db) / db
            total += -r if h else r
        return float(total * 100 / len(mm))


@dataclass
class MetricTable:
    methods: list
    metrics: list
    values: np.ndarray  # (methods, metrics)
    higher_better: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.methods), len(self.metrics)):
            raise InputValidationError("values must be (methods x metrics)")
        if len(self.higher_better) != len(self.metrics):
            raise InputValidationError("one direction flag per metric")


def mean_rank(table):
    """Average rank per method over metrics; rank 1 is best, ties share the mean rank."""
    if len(table.methods) < 2:
        raise InputValidationError("mean rank needs at least two methods")
    ranks = np.empty_like(table.values)
    for j, hb in enumerate(table.higher_better):
        col = table.values[:, j]
        ranks[:, j] = rankdata(-col if hb else col, method="average")
    return dict(zip(table.methods, ranks.mean(axis=1).tolist()))


# CSV exchange ---------------------------------------------------------------

_COL = re.compile(r"task(\d+)_y(\d+)$")


def write_csv(path, x, ys):
    path = Path(path)
    header = [f"x{j}" for j in range(x.shape[1])]
    for i, y in enumerate(ys):
        header += [f"task{i}_y{j}" for j in range(y.shape[1])]
    data = np.hstack([x, *ys])
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    return path


def read_csv(path):
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader if r]
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    xcols = [i for i, h in enumerate(header) if re.fullmatch(r"x\d+", h)]
    tasks = {}
    for i, h in enumerate(header):
        mt = _COL.match(h)
        if mt:
            tasks.setdefault(int(mt.group(1)), []).append(i)
        elif i not in xcols:
            raise InputValidationError(f"{path}: unexpected column {h!r}")
    x = data[:, xcols]
    ys = [data[:, tasks[t]] for t in sorted(tasks)]
    return x, ys


def export_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(directory / "train.csv", dataset.x_train, dataset.y_train)
    write_csv(directory / "test.csv", dataset.x_test, dataset.y_test)
    return directory


def import_dataset(directory, error_scales=None):
    directory = Path(directory)
    xtr, ytr = read_csv(directory / "train.csv")
    xte, yte = read_csv(directory / "test.csv")
    return Dataset(xtr, ytr, xte, yte, error_scales)


def target_kernel_energy(net, dataset, task_id, samples=128):
    """Rayleigh quotient y^T K y / y^T y of task ``task_id``'s per-sample NTK
    along its own training targets (first ``samples`` points).

    This is the rate at which gradient flow removes the target from the
    residual when the net output starts near zero.
    """
    from .net import jacobian_shared

    x = dataset.x_train[:samples]
    y = np.asarray(dataset.y_train[task_id][:samples], dtype=np.float64).ravel()
    J = jacobian_shared(net, x, task_id)
    v = J.T @ y
    return float(v @ v / (y @ y))


def default_net_spec(data_spec, width=64, depth=2, activation="tanh", seed=0):
    widths = (data_spec.input_dim,) + (width,) * depth
    heads = tuple(HeadSpec((), d) for d in data_spec.output_dims)
    from .net import NetSpec

    return NetSpec(data_spec.input_dim, widths, width, heads, activation, seed)


def default_train_config(data_spec, strategy="LS", seed=0, iterations=10_000, **kw):
    spec = default_net_spec(data_spec, seed=seed)
    return TrainConfig(spec, Strategy(strategy), iterations=iterations, seed=seed, **kw)

"""Checks of the frozen-kernel picture of training.

Under gradient flow on summed squared errors with the kernel frozen at
initialisation, stacked outputs obey ``O(t) = y + exp(-eta K t) (O(0) - y)``.
Here we predict that trajectory, project errors onto the kernel eigenbasis,
fit per-component exponential decay rates and compare them with
``eta * lambda_j``.  ``verify_weighted_ntk`` checks that scaling kernel
blocks by ``omega_i omega_j`` equals taking the Gram of weighted Jacobians.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import linalg
from . import ntk as ntk_mod
from .errors import InputValidationError
from .net import HeadSpec, NetSpec, TaskBatch, init
from .trainer import Dataset, gradient_flow, stacked_outputs

TRUNCATE_BELOW = 1e-10


def predict_training_error(K, y, o0, eta, t):
    """Stacked outputs at flow time ``t`` under the frozen kernel ``K``.

    Returns ``y + exp(-eta K t) (o0 - y)``; with ``o0 = 0`` that is
    ``(I - exp(-eta K t)) y``.
    """
    K = linalg.as_symmetric(K, "K")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    o0 = np.asarray(o0, dtype=np.float64).reshape(-1)
    if not (K.shape[0] == y.size == o0.size):
        raise InputValidationError(
            f"kernel is {K.shape[0]}-dimensional but y has {y.size} and o0 has {o0.size} entries"
        )
    if eta * t == 0:
        return o0.copy()
    return y + linalg.sym_exp(K, -eta * t) @ (o0 - y)


def eigenbasis_projection(K, outputs, y, decomp=None):
    """``Q^T (O - y)`` with Q the eigenvectors of K (descending eigenvalues).

    ``outputs`` may be a single stacked vector or a (times, dim) array.
    Pass ``decomp`` to reuse an existing decomposition of K.
    """
    if decomp is None:
        decomp = linalg.sym_eig(K)
    Q = decomp.eigenvectors
    err = np.asarray(outputs, dtype=np.float64) - np.asarray(y, dtype=np.float64).reshape(-1)
    if err.shape[-1] != Q.shape[0]:
        raise InputValidationError(f"outputs have dim {err.shape[-1]}, kernel has {Q.shape[0]}")
    return err @ Q


@dataclass
class DecayReport:
    eigenvalues: np.ndarray  # of the kernel whose basis was used (NaN when unknown)
    fitted_rates: np.ndarray  # minus the slope of log|projection| in time
    r_squared: np.ndarray
    horizon: int  # number of time samples supplied
    excluded: np.ndarray = field(default=None)  # bool, components not fitted
    eta: float = float("nan")

    def __post_init__(self):
        if self.excluded is None:
            self.excluded = np.zeros(len(self.fitted_rates), dtype=bool)

    @property
    def predicted_rates(self):
        return self.eta * np.asarray(self.eigenvalues)

    def to_dict(self):
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "fitted_rates": [float(v) for v in self.fitted_rates],
            "r_squared": [float(v) for v in self.r_squared],
            "excluded": [bool(v) for v in self.excluded],
            "horizon": int(self.horizon),
            "eta": float(self.eta),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["eigenvalues"], dtype=np.float64),
            np.array(d["fitted_rates"], dtype=np.float64),
            np.array(d["r_squared"], dtype=np.float64),
            int(d["horizon"]),
            np.array(d["excluded"], dtype=bool),
            float(d.get("eta", float("nan"))),
        )


def _fit_one(t, p, floor):
    a = np.abs(p)
    if a[0] < floor:
        return np.nan, np.nan, True
    # cut the series at the first sample below the floor
    below = np.flatnonzero(a < floor)
    stop = below[0] if below.size else a.size
    if stop < 2:
        return np.nan, np.nan, True
    tt, ll = t[:stop], np.log(a[:stop])
    slope, icpt = np.polyfit(tt, ll, 1)
    resid = ll - (slope * tt + icpt)
    ss_tot = float(np.sum((ll - ll.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    # a flat series has nothing to explain (its scatter is rounding only);
    # report r^2 = 0 so it reads as a poor fit
    flat = ss_tot <= ll.size * (1e-12 * max(1.0, float(np.max(np.abs(ll))))) ** 2
    r2 = 0.0 if flat else 1.0 - ss_res / ss_tot
    return -slope, r2, False


def fit_decay(times, projections, eta=float("nan"), eigenvalues=None, floor=TRUNCATE_BELOW):
    """Per-component exponential rates from a (times, dim) projection trajectory.

    Each column is fitted by least squares of log|p| against t, using the
    samples before its magnitude first drops under ``floor``.  Columns whose
    initial magnitude is already below ``floor``, or that keep fewer than two
    usable samples, are marked excluded with NaN rate and r^2.
    """
    t = np.asarray(times, dtype=np.float64)
    P = np.asarray(projections, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if t.ndim != 1 or P.shape[0] != t.size:
        raise InputValidationError("projections must have one row per time sample")
    if t.size < 5:
        raise InputValidationError(f"need at least 5 time samples, got {t.size}")
    if np.any(np.diff(t) <= 0):
        raise InputValidationError("times must be strictly increasing")
    dim = P.shape[1]
    rates, r2s, excl = np.empty(dim), np.empty(dim), np.zeros(dim, dtype=bool)
    for j in range(dim):
        rates[j], r2s[j], excl[j] = _fit_one(t, P[:, j], floor)
    lam = np.full(dim, np.nan) if eigenvalues is None else np.asarray(eigenvalues, dtype=np.float64)
    if lam.size != dim:
        raise InputValidationError("one eigenvalue per component expected")
    return DecayReport(lam, rates, r2s, int(t.size), excl, float(eta))


def _weighted_rows(net, batch, omegas, gran, space):
    rows_fn = ntk_mod.shared_rows if space == "shared" else ntk_mod.repr_rows
    return [w * rows_fn(net, batch, t, gran) for t, w in enumerate(omegas)]


def verify_weighted_ntk(net, batch, omegas, gran=ntk_mod.PER_SAMPLE, space="shared"):
    """Largest blockwise relative Frobenius gap between two weighted-kernel builds.

    (a) scale the blocks of the extended kernel by ``omega_i omega_j``;
    (b) take the Gram of the stacked ``omega_i``-scaled Jacobians.
    Blocks that are exactly zero in (b) contribute their absolute norm in (a).
    """
    omegas = np.asarray(omegas, dtype=np.float64)
    if omegas.shape != (net.k,):
        raise InputValidationError(f"need {net.k} weights, got shape {omegas.shape}")
    if np.any(omegas < 0) or not np.all(np.isfinite(omegas)):
        raise InputValidationError("weights must be finite and non-negative")
    build = ntk_mod.extended_ntk if space == "shared" else ntk_mod.sr_extended_ntk
    ext = build(net, batch, gran)
    a = ext.weighted(omegas)
    b = linalg.gram(np.vstack(_weighted_rows(net, batch, omegas, gran, space)))
    edges = np.cumsum([0] + ext.sizes)
    worst = 0.0
    for i in range(net.k):
        for j in range(net.k):
            sl = (slice(edges[i], edges[i + 1]), slice(edges[j], edges[j + 1]))
            diff = np.linalg.norm(a[sl] - b[sl])
            ref = np.linalg.norm(b[sl])
            worst = max(worst, diff / ref if ref > 0 else diff)
    return float(worst)


# frozen-kernel validation ---------------------------------------------------


@dataclass(frozen=True)
class LazyConfig:
    """Setup for the frozen-kernel check.

    One hidden tanh layer of ``width`` units forms the trunk and each task
    has a linear head.  Targets are ``sin(2 pi f_i x.w_i)`` on inputs drawn
    uniformly from ``[-1, 1]^input_dim``.
    """

    width: int = 512
    samples: int = 8
    input_dim: int = 1
    frequencies: tuple = (0.5, 1.0)
    eta: float = 1e-3
    t_end: float = 200.0
    n_times: int = 41
    dt: float = 2.5e-4
    seed: int = 0
    top: int = 3
    pred_tol: float = 0.10
    rate_tol: float = 0.20
    min_r2: float = 0.95
    min_spearman: float = 0.9
    floor: float = TRUNCATE_BELOW
    min_initial: float = 1e-3  # components starting below this fraction of |O(0) - y| are not fitted

    def __post_init__(self):
        if self.width < 1 or self.samples < 1 or self.input_dim < 1:
            raise InputValidationError("width, samples and input_dim must be >= 1")
        if not self.frequencies:
            raise InputValidationError("need at least one task frequency")
        if not (self.eta > 0 and self.t_end > 0 and self.dt > 0):
            raise InputValidationError("eta, t_end and dt must be > 0")
        if self.n_times < 5:
            raise InputValidationError("n_times must be >= 5")
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))


def lazy_problem(cfg):
    """The net and dataset used by the frozen-kernel check."""
    k = len(cfg.frequencies)
    spec = NetSpec(
        cfg.input_dim,
        (cfg.input_dim, cfg.width),
        cfg.width,
        tuple(HeadSpec((), 1) for _ in range(k)),
        "tanh",
        cfg.seed,
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    x = rng.uniform(-1.0, 1.0, size=(cfg.samples, cfg.input_dim))
    ys = []
    for f in cfg.frequencies:
        w = rng.standard_normal(cfg.input_dim)
        w /= np.linalg.norm(w)
        ys.append(np.sin(2 * np.pi * f * (x @ w))[:, None])
    # train and test splits coincide: only the training trajectory matters here
    return init(spec), Dataset(x, ys, x, ys)


def flow_kernel(net, batch, reduction="sum"):
    """Kernel driving the stacked outputs under ``gradient_flow``.

    With summed squared errors ``sum_i 1/2 |c_i e_i|^2`` the outputs obey
    d O / d tau = -K (O - y) with ``K = C J J^T C`` over shared theta
    (C the per-row error scales); the mean reduction divides K by m.
    """
    ext = ntk_mod.extended_ntk(net, batch, ntk_mod.PER_SAMPLE)
    c = np.repeat(batch.error_scales, ext.sizes)
    K = ext.assembled * np.outer(c, c)
    return K / batch.size if reduction == "mean" else K


@dataclass
class LazyReport:
    config: LazyConfig
    times: np.ndarray
    predicted: np.ndarray  # (times, dim)
    actual: np.ndarray
    targets: np.ndarray
    rel_error: float  # max over time of |pred - act| / |act - y|, stacked 2-norms
    decay: DecayReport
    top_rate_errors: np.ndarray  # relative |fitted - eta lambda| of the top components used
    spearman: float

    @property
    def passed(self):
        c = self.config
        return bool(
            self.rel_error <= c.pred_tol
            and self.top_rate_errors.size > 0
            and np.all(self.top_rate_errors <= c.rate_tol)
            and self.spearman >= c.min_spearman
        )


def lazy_regime_check(cfg=LazyConfig()):
    """Integrate the real flow, compare with the frozen-kernel prediction and fit decays."""
    net, data = lazy_problem(cfg)
    batch = data.train_batch()
    K = flow_kernel(net, batch)
    y = np.concatenate([t.reshape(-1) for t in batch.targets])
    o0 = stacked_outputs(net, batch.inputs)
    times = np.linspace(0.0, cfg.t_end, cfg.n_times)
    traj = gradient_flow(net, data, cfg.eta, cfg.t_end, cfg.dt, times=times)
    actual = traj.outputs
    dec = linalg.sym_eig(K)
    Q, lam = dec.eigenvectors, dec.eigenvalues
    # prediction in the eigenbasis: component j decays as exp(-eta lambda_j t)
    p0 = (o0 - y) @ Q
    predicted = y + (np.exp(-cfg.eta * np.outer(times, lam)) * p0) @ Q.T
    err_act = actual - y
    denom = np.linalg.norm(err_act, axis=1)
    rel = float(np.max(np.linalg.norm(predicted - actual, axis=1) / np.maximum(denom, 1e-300)))

    proj = eigenbasis_projection(K, actual, y, dec)
    report = fit_decay(times, proj, cfg.eta, lam, cfg.floor)
    small = np.abs(proj[0]) < cfg.min_initial * np.linalg.norm(proj[0])
    report.excluded |= small
    report.fitted_rates[small] = np.nan
    report.r_squared[small] = np.nan

    used = [j for j in range(lam.size) if not report.excluded[j]]
    top = [j for j in used if report.r_squared[j] > cfg.min_r2][: cfg.top]
    pred_rates = cfg.eta * lam
    top_err = np.array([abs(report.fitted_rates[j] - pred_rates[j]) / pred_rates[j] for j in top])
    if len(used) >= 2:
        rho = float(spearmanr(lam[used], report.fitted_rates[used]).statistic)
    else:
        rho = float("nan")
    return LazyReport(cfg, times, predicted, actual, np.tile(y, (times.size, 1)), rel, report, top_err, rho)

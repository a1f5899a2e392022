import numpy as np
import pytest

from ntkmtl import dynamics as D
from ntkmtl import linalg, ntk
from ntkmtl import net as N
from ntkmtl.errors import InputValidationError

from oracles import random_spec


def rand_psd(seed, n):
    J = np.random.default_rng(seed).standard_normal((n, n + 2))
    return linalg.gram(J)


def test_prediction_endpoints():
    K = rand_psd(0, 5)
    rng = np.random.default_rng(1)
    y, o0 = rng.standard_normal(5), rng.standard_normal(5)
    assert np.array_equal(D.predict_training_error(K, y, o0, 0.1, 0.0), o0)
    lam_min = np.linalg.eigvalsh(K)[0]
    t = 50 / (0.1 * lam_min)
    far = D.predict_training_error(K, y, o0, 0.1, t)
    assert np.linalg.norm(far - y) <= np.exp(-0.1 * lam_min * t) * np.linalg.norm(o0 - y) + 1e-12


def test_prediction_scalar_closed_form():
    x, eta = 0.7, 0.01
    for t in (0.5, 3.0, 40.0):
        got = D.predict_training_error([[x * x]], [1.0], [0.0], eta, t)[0]
        assert abs(got - (1 - np.exp(-eta * x * x * t))) <= 1e-15


def test_prediction_dim_mismatch():
    with pytest.raises(InputValidationError):
        D.predict_training_error(np.eye(3), np.zeros(2), np.zeros(3), 0.1, 1.0)


def test_projection_properties():
    K = rand_psd(2, 6)
    rng = np.random.default_rng(3)
    y, O = rng.standard_normal(6), rng.standard_normal(6)
    assert not np.any(D.eigenbasis_projection(K, y, y))
    p = D.eigenbasis_projection(K, O, y)
    Q = linalg.sym_eig(K).eigenvectors
    assert np.allclose(Q @ p, O - y, rtol=0, atol=1e-9)
    assert abs(np.linalg.norm(p) - np.linalg.norm(O - y)) <= 1e-10
    Kd = np.diag([1.0, 4.0, 2.0])
    p = D.eigenbasis_projection(Kd, [1.0, 2.0, 3.0], np.zeros(3))
    assert np.allclose(np.abs(p), [2.0, 3.0, 1.0])


def test_fit_decay_synthetic():
    t = np.linspace(0, 3, 31)
    rep = D.fit_decay(t, np.exp(-2 * t))
    assert abs(rep.fitted_rates[0] - 2.0) <= 1e-9
    rep = D.fit_decay(t, np.column_stack([np.exp(-t), -0.3 * np.exp(-5 * t)]))
    assert np.allclose(rep.fitted_rates, [1.0, 5.0], atol=1e-9)
    assert np.all(rep.r_squared > 1 - 1e-12)
    rep = D.fit_decay(t, np.full(31, 0.4))
    assert abs(rep.fitted_rates[0]) <= 1e-12 and rep.r_squared[0] < 0.5


def test_fit_decay_truncation_and_exclusion():
    t = np.linspace(0, 10, 11)
    p = np.exp(-8 * t)  # under 1e-10 from t = 3 on
    rep = D.fit_decay(t, np.column_stack([p, np.zeros(11), np.r_[1.0, np.zeros(10)]]))
    assert abs(rep.fitted_rates[0] - 8.0) <= 1e-9
    assert rep.excluded.tolist() == [False, True, True]
    assert np.isnan(rep.fitted_rates[1:]).all()
    with pytest.raises(InputValidationError):
        D.fit_decay(t[:4], p[:4])
    with pytest.raises(InputValidationError):
        D.fit_decay(t[::-1], p)


def test_decay_report_round_trip():
    t = np.linspace(0, 1, 6)
    rep = D.fit_decay(t, np.column_stack([np.exp(-t), np.zeros(6)]), eta=0.5, eigenvalues=[2.0, 1.0])
    back = D.DecayReport.from_dict(rep.to_dict())
    assert np.array_equal(back.fitted_rates, rep.fitted_rates, equal_nan=True)
    assert np.array_equal(back.excluded, rep.excluded)
    assert np.array_equal(back.predicted_rates, [1.0, 0.5])


def weighted_problem(seed, k=2):
    rng = np.random.default_rng(seed)
    net = N.init(random_spec(rng, k=k, max_params=200))
    x = rng.uniform(-1, 1, (6, net.spec.input_dim))
    ys = [rng.standard_normal((6, h.output_dim)) for h in net.spec.heads]
    return net, N.TaskBatch(x, ys)


@pytest.mark.parametrize("space", ["shared", "repr"])
def test_weighted_kernel_constructions_agree(space):
    net, b = weighted_problem(4)
    assert D.verify_weighted_ntk(net, b, [1.0, 1.0], space=space) <= 1e-15
    assert D.verify_weighted_ntk(net, b, [2.0, 3.0], space=space) <= 1e-10
    assert D.verify_weighted_ntk(net, b, [2.0, 3.0], ntk.per_minibatch(3), space) <= 1e-10


def test_zero_weight_annihilates_blocks():
    net, b = weighted_problem(5, k=3)
    w = np.array([1.5, 0.0, 0.5])
    assert D.verify_weighted_ntk(net, b, w) == 0.0 or D.verify_weighted_ntk(net, b, w) <= 1e-10
    E = ntk.extended_ntk(net, b, ntk.PER_SAMPLE)
    Kw = E.weighted(w)
    edges = np.cumsum([0] + E.sizes)
    assert not np.any(Kw[edges[1]:edges[2], :]) and not np.any(Kw[:, edges[1]:edges[2]])
    with pytest.raises(InputValidationError):
        D.verify_weighted_ntk(net, b, [1.0, -1.0, 1.0])


def test_flow_kernel_matches_jacobians():
    cfg = D.LazyConfig(width=16, samples=4)
    net, data = D.lazy_problem(cfg)
    b = data.train_batch()
    K = D.flow_kernel(net, b)
    J = np.vstack([N.jacobian_shared(net, b.inputs, t) for t in range(net.k)])
    assert np.allclose(K, J @ J.T, rtol=1e-12, atol=1e-12)
    assert np.allclose(D.flow_kernel(net, b, "mean"), K / 4)


def test_lazy_check_small_net():
    # a narrow, short version of the acceptance setup; predictions still hold
    rep = D.lazy_regime_check(D.LazyConfig(width=128, t_end=50.0, n_times=21))
    assert rep.rel_error < 0.1
    assert rep.predicted.shape == rep.actual.shape == (21, 16)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntkmtl import bench as B
from ntkmtl import net as N
from ntkmtl import ntk
from ntkmtl.errors import InputValidationError
from ntkmtl.trainer import Dataset, TrainConfig, train
from ntkmtl.weighting import Strategy


def test_generate_deterministic_and_bounded():
    s = B.SynthSpec(noise_std=0.0, seed=3)
    a, b = B.generate(s), B.generate(s)
    assert np.array_equal(a.x_train, b.x_train)
    assert all(np.array_equal(p, q) for p, q in zip(a.y_train, b.y_train))
    assert all(np.abs(y).max() <= 1.0 for y in a.y_train)
    assert a.x_train.shape == (512, 2) and a.x_test.shape == (256, 2)
    assert not np.array_equal(B.generate(B.SynthSpec(seed=4)).x_train, a.x_train)


def test_spec_validation():
    with pytest.raises(InputValidationError):
        B.SynthSpec(kind="images")
    with pytest.raises(InputValidationError):
        B.SynthSpec(samples=1)
    with pytest.raises(InputValidationError):
        B.SynthSpec(noise_std=-1.0)


def test_scalemix_loss_ratio():
    s = B.SynthSpec(kind="scalemix", scales=(1.0, 100.0), noise_std=0.0)
    data = B.generate(s)
    net = N.init(B.default_net_spec(s))
    net.head_params[1][:] = net.head_params[0]
    b = data.train_batch()
    losses = N.task_losses(N.forward(net, b.inputs), b)
    assert np.isclose(losses[1] / losses[0], 1e4, rtol=1e-12)


def test_randlin_shapes():
    s = B.SynthSpec(kind="randlin", input_dim=3, conditions=(1.0, 50.0))
    data = B.generate(s)
    assert [y.shape for y in data.y_train] == [(512, 3), (512, 3)]


def test_delta_m_examples():
    assert B.delta_m([1.0, 2.0], [1.0, 2.0], [False, False]) == 0.0
    assert B.delta_m([0.9, 1.2], [1.0, 1.0], [False, False]) == 5.0
    assert B.delta_m([11.0], [10.0], [True]) == -10.0
    with pytest.raises(InputValidationError):
        B.delta_m([1.0], [0.0], [False])
    with pytest.raises(InputValidationError):
        B.delta_m([1.0, 2.0], [1.0], [False])


metric_rows = st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.01, 100), st.booleans()),
                       min_size=1, max_size=6)


@given(metric_rows)
def test_delta_m_close_to_float_formula(rows):
    mm = np.array([r[0] for r in rows])
    mb = np.array([r[1] for r in rows])
    hb = [r[3] for r in rows]
    plain = np.mean(np.where(hb, -1.0, 1.0) * (mm - mb) / mb) * 100
    assert np.isclose(B.delta_m(mm, mb, hb), plain, rtol=1e-12, atol=1e-10)


@given(metric_rows)
def test_delta_m_ratio_invariance(rows):
    mm = np.array([r[0] for r in rows])
    mb = np.array([r[1] for r in rows])
    c = np.array([r[2] for r in rows])
    hb = [r[3] for r in rows]
    assert np.isclose(B.delta_m(mm * c, mb * c, hb), B.delta_m(mm, mb, hb), rtol=1e-9, atol=1e-9)


def test_mean_rank_examples():
    t = B.MetricTable(["a", "b", "c"], ["m1", "m2"], [[0.1, 5.0], [0.2, 4.0], [0.3, 3.0]], [False, False])  # opposite orders
    assert B.mean_rank(t) == {"a": 2.0, "b": 2.0, "c": 2.0}
    t = B.MetricTable(["a", "b"], ["m"], [[1.0], [1.0]], [False])
    assert B.mean_rank(t) == {"a": 1.5, "b": 1.5}
    t = B.MetricTable(["best", "x", "y"], ["m1", "m2", "m3"],
                      [[0.1, 9.0, 0.5], [0.2, 8.0, 0.7], [0.3, 8.0, 0.6]], [False, True, False])
    mr = B.mean_rank(t)
    assert mr["best"] == 1.0
    # x: ranks 2, 2.5, 3 ; y: ranks 3, 2.5, 2
    assert mr["x"] == pytest.approx(7.5 / 3) and mr["y"] == pytest.approx(7.5 / 3)
    with pytest.raises(InputValidationError):
        B.mean_rank(B.MetricTable(["a"], ["m"], [[1.0]], [False]))


@given(st.integers(0, 2**32 - 1))
def test_mean_rank_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.1, 2.0, (4, 3))
    hb = [bool(b) for b in rng.integers(0, 2, 3)]
    a = B.mean_rank(B.MetricTable(list("abcd"), list("xyz"), v, hb))
    b = B.mean_rank(B.MetricTable(list("abcd"), list("xyz"), np.log(v) * 3 + 1, hb))
    assert a == b


def small_cfg(spec_, **kw):
    return TrainConfig(B.default_net_spec(spec_, width=8, depth=1), Strategy("LS"),
                       iterations=kw.pop("iterations", 50), batch_size=32, **kw)


def test_stl_k1_equals_mtl_ls():
    s = B.SynthSpec(samples=64, test_samples=32, frequencies=((1,),))
    data = B.generate(s)
    cfg = small_cfg(s)
    stl = B.stl_baseline(data, cfg)
    mtl = train(cfg, data).final_metrics["test_loss"]
    assert abs(stl[0] - mtl[0]) <= 1e-10
    assert np.array_equal(stl, B.stl_baseline(data, cfg))


def test_stl_solves_realizable_linear_task():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (96, 2))
    y = x @ np.array([[0.7], [-1.2]])
    data = Dataset(x[:64], [y[:64]], x[64:], [y[64:]])
    spec = N.NetSpec(2, (2, 4), 4, (N.HeadSpec(),), "identity")
    stl = B.stl_baseline(data, TrainConfig(spec, lr=0.1, iterations=2000, batch_size=16))
    assert stl[0] < 1e-6


def test_frequency_imbalance_at_init():
    # the low-frequency target sits in the kernel's fast directions at init
    wins = 0
    for seed in range(10):
        s = B.SynthSpec(seed=seed)
        data = B.generate(s)
        net = N.init(B.default_net_spec(s, seed=seed))
        wins += B.target_kernel_energy(net, data, 0) > B.target_kernel_energy(net, data, 2)
    assert wins >= 9


def test_target_kernel_energy_matches_explicit_kernel():
    s = B.SynthSpec(samples=20, test_samples=4, seed=3)
    data = B.generate(s)
    net = N.init(B.default_net_spec(s, width=8, seed=3))
    J = N.jacobian_shared(net, data.x_train[:12], 1)
    y = data.y_train[1][:12].ravel()
    want = y @ (J @ J.T) @ y / (y @ y)
    assert abs(B.target_kernel_energy(net, data, 1, samples=12) - want) <= 1e-12 * want


def test_csv_round_trip(tmp_path):
    s = B.SynthSpec(samples=10, test_samples=5, kind="randlin", conditions=(2.0,))
    data = B.generate(s)
    B.export_dataset(data, tmp_path)
    back = B.import_dataset(tmp_path)
    assert np.array_equal(back.x_train, data.x_train)
    assert np.array_equal(back.y_test[0], data.y_test[0])
    head = (tmp_path / "train.csv").read_bytes().split(b"\n")[0]
    assert head == b"x0,x1,task0_y0,task0_y1"
    assert b"\r" not in (tmp_path / "train.csv").read_bytes()

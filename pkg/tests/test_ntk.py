import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntkmtl import linalg, ntk
from ntkmtl import net as N
from ntkmtl.errors import InputValidationError

from oracles import naive_gram, random_spec


def problem(seed, m=12, k=None, max_params=300):
    rng = np.random.default_rng(seed)
    sp = random_spec(rng, max_params=max_params, k=k)
    net = N.init(sp)
    x = rng.uniform(-1, 1, (m, sp.input_dim))
    ys = [rng.standard_normal((m, h.output_dim)) for h in sp.heads]
    return net, N.TaskBatch(x, ys)


def sub_batches(batch, n):
    per = batch.size // n
    for j in range(n):
        s = slice(j * per, (j + 1) * per)
        yield N.TaskBatch(batch.inputs[s], [y[s] for y in batch.targets], 1, batch.error_scales)


def test_granularity_validation():
    with pytest.raises(InputValidationError):
        ntk.per_minibatch(0)
    with pytest.raises(InputValidationError):
        ntk.Granularity("per_row")


def test_single_block_is_squared_norm():
    net, b = problem(1)
    g = N.grad_shared(net, b, 0)
    K = ntk.task_ntk(net, b, 0, ntk.per_minibatch(1))
    assert K.shape == (1, 1)
    assert np.isclose(K[0, 0], g @ g, rtol=1e-13)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_minibatch_kernel_matches_naive_loop(n):
    net, b = problem(10 + n)
    for t in range(net.k):
        grads = [N.grad_shared(net, sb, t) for sb in sub_batches(b, n)]
        ref = naive_gram(grads)
        K = ntk.task_ntk(net, b, t, ntk.per_minibatch(n))
        assert np.abs(K - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())
        # representation space: gradient w.r.t. each mini-batch's own z
        zgrads = []
        for sb in sub_batches(b, n):
            tr = N.forward(net, sb.inputs)
            _, dz = N.backward_head(net, tr, t, N.loss_output_grad(tr, sb, t))
            zgrads.append(dz.reshape(-1))
        ref = naive_gram(zgrads)
        K = ntk.sr_task_ntk(net, b, t, ntk.per_minibatch(n))
        assert np.abs(K - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


def test_per_sample_matches_naive_loop():
    net, b = problem(20, m=5)
    for t in range(net.k):
        rows = [N.jacobian_shared(net, b.inputs[u:u + 1], t) for u in range(b.size)]
        ref = naive_gram(np.vstack(rows))
        K = ntk.task_ntk(net, b, t, ntk.PER_SAMPLE)
        assert np.abs(K - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


def test_duplicate_sample_rank_deficient():
    net, b = problem(21, m=4, k=1)
    x = np.vstack([b.inputs, b.inputs[:1]])
    bb = N.TaskBatch(x, [np.vstack([y, y[:1]]) for y in b.targets])
    K = ntk.task_ntk(net, bb, 0, ntk.PER_SAMPLE)
    c = net.spec.heads[0].output_dim
    assert np.array_equal(K[:c], K[-c:])
    w = np.linalg.eigvalsh(K)
    assert w[0] <= 1e-10 * w[-1]


def test_extended_k1_and_identical_tasks():
    net, b = problem(22, k=1)
    E = ntk.extended_ntk(net, b, ntk.PER_SAMPLE)
    assert np.allclose(E.assembled, ntk.task_ntk(net, b, 0, ntk.PER_SAMPLE), rtol=0, atol=1e-14)
    sp = N.NetSpec(2, (2, 5), 5, (N.HeadSpec(), N.HeadSpec()))
    net = N.init(sp)
    net.head_params[1][:] = net.head_params[0]
    x = np.random.default_rng(0).standard_normal((6, 2))
    y = np.sin(x[:, :1])
    b = N.TaskBatch(x, [y, y.copy()])
    for gran in (ntk.PER_SAMPLE, ntk.per_minibatch(3)):
        E = ntk.extended_ntk(net, b, gran)
        K11, K12, K22 = E.blocks[0][0], E.blocks[0][1], E.blocks[1][1]
        assert np.abs(K11 - K22).max() <= 1e-10 and np.abs(K11 - K12).max() <= 1e-10


@given(st.integers(0, 2**32 - 1), st.sampled_from(["sample", 1, 2, 4]))
def test_block_symmetry_and_psd(seed, g):
    net, b = problem(seed)
    gran = ntk.PER_SAMPLE if g == "sample" else ntk.per_minibatch(g)
    for E in (ntk.extended_ntk(net, b, gran), ntk.sr_extended_ntk(net, b, gran)):
        for i in range(E.k):
            for j in range(E.k):
                assert np.abs(E.blocks[i][j] - E.blocks[j][i].T).max() <= 1e-10
            wi = np.linalg.eigvalsh(E.blocks[i][i])
            assert wi[0] >= -1e-8 * max(wi[-1], 0.0)
        w = linalg.sym_eig(E.assembled).eigenvalues
        assert w[-1] >= -1e-8 * w[0]


def test_sr_kernel_on_identity_trunk():
    # z = x exactly, linear head W: d f / d z_u = W for every sample, so the
    # per-sample representation kernel is kron(I, W W^T).  A second net that
    # stores the z vectors as its shared weights (one-hot inputs) sees the
    # same derivative plus a bias column, i.e. kron(I + 11^T, W W^T).
    r, c, m = 3, 2, 4
    sp = N.NetSpec(r, (r, r), r, (N.HeadSpec((), c),), "identity")
    theta = np.concatenate([np.eye(r).ravel(), np.zeros(r)])
    rng = np.random.default_rng(5)
    head = rng.standard_normal(c * r + c)
    net = N.MtlNet(sp, theta, [head])
    X = rng.standard_normal((m, r))
    b = N.TaskBatch(X, [np.zeros((m, c))])
    W = head[: c * r].reshape(c, r)
    K = ntk.sr_task_ntk(net, b, 0, ntk.PER_SAMPLE)
    assert np.allclose(K, np.kron(np.eye(m), W @ W.T), rtol=0, atol=1e-14)

    sp2 = N.NetSpec(m, (m, r), r, (N.HeadSpec((), c),), "identity")
    net2 = N.MtlNet(sp2, np.concatenate([X.T.ravel(), np.zeros(r)]), [head])
    b2 = N.TaskBatch(np.eye(m), [np.zeros((m, c))])
    assert np.allclose(N.forward(net2, np.eye(m)).outputs[0], N.forward(net, X).outputs[0])
    K2 = ntk.task_ntk(net2, b2, 0, ntk.PER_SAMPLE)
    assert np.allclose(K2 - K, np.kron(np.ones((m, m)), W @ W.T), rtol=0, atol=1e-13)


def test_sr_zero_head_gives_zero_kernel():
    net, b = problem(23)
    net.head_params[0][:] = 0
    assert not np.any(ntk.sr_task_ntk(net, b, 0, ntk.PER_SAMPLE))
    assert not np.any(ntk.sr_task_ntk(net, b, 0, ntk.per_minibatch(2)))


def test_summary_examples():
    s = ntk.omegas_from_lambdas([1.0, 1.0])
    assert s.lambda_bar == 1.0 and np.array_equal(s.omegas, [1.0, 1.0])
    s = ntk.omegas_from_lambdas([4.0, 1.0])
    assert s.lambda_bar == 2.5
    assert np.allclose(s.omegas, [0.7905694150420949, 1.5811388300841898], rtol=1e-15)
    assert np.allclose(s.omegas**2 * s.lambdas, 2.5, rtol=4e-16)
    s = ntk.omegas_from_lambdas([9.0])
    assert np.array_equal(s.omegas, [1.0])


def test_summarize_uses_max_eigenvalue():
    K1 = np.diag([4.0, 1.0])
    K2 = np.array([[0.5, 0.5], [0.5, 0.5]])
    s = ntk.summarize([K1, K2])
    assert np.allclose(s.lambdas, [4.0, 1.0], rtol=1e-12)


def test_zero_kernels_degenerate_to_unit_weights():
    s = ntk.summarize([np.zeros((2, 2)), np.zeros((2, 2))])
    assert np.array_equal(s.omegas, [1.0, 1.0])
    assert s.floored.all()
    s = ntk.omegas_from_lambdas([1.0, 0.0])
    assert s.floored.tolist() == [False, True] and np.all(np.isfinite(s.omegas))


@given(st.lists(st.floats(1e-6, 1e6), min_size=1, max_size=12))
def test_weight_identity_within_4ulp(lams):
    s = ntk.omegas_from_lambdas(lams)
    lhs = s.omegas**2 * s.lambdas
    assert np.all(np.abs(lhs - s.lambda_bar) <= 4 * np.spacing(s.lambda_bar))
    assert np.all(s.omegas > 0)


def test_loss_scale_response():
    net, b = problem(24, k=2)
    gran = ntk.per_minibatch(3)
    l1 = ntk.max_eigs([ntk.task_ntk(net, b, 0, gran)])[0]
    c = 7.0
    scaled = N.TaskBatch(b.inputs, b.targets, 1, np.array([np.sqrt(c), 1.0]))
    l1c = ntk.max_eigs([ntk.task_ntk(net, scaled, 0, gran)])[0]
    assert abs(l1c - c**2 * l1) <= 1e-8 * c**2 * l1


@given(st.integers(0, 2**32 - 1))
def test_weighted_kernels_share_top_eigenvalue(seed):
    net, b = problem(seed)
    Ks = [ntk.task_ntk(net, b, t, ntk.PER_SAMPLE) for t in range(net.k)]
    if min(np.abs(K).max() for K in Ks) == 0:
        return
    s = ntk.summarize(Ks)
    for w, K in zip(s.omegas, Ks):
        top = linalg.sym_eig(w * w * K).eigenvalues[0]
        assert abs(top - s.lambda_bar) <= 1e-8 * s.lambda_bar


def test_max_eigs_groups_by_size(rng):
    Ks = [linalg.gram(rng.standard_normal((d, 3))) for d in (2, 3, 2, 1)]
    lams = ntk.max_eigs(Ks)
    ref = [linalg.sym_eig(K).eigenvalues[0] for K in Ks]
    assert np.allclose(lams, ref, rtol=1e-10)


def test_near_degenerate_top_falls_back():
    # top two eigenvalues agree to 6e-4; power iteration alone runs out of budget here
    Q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((4, 4)))
    K = Q @ np.diag([1.0, 0.99935, 0.3, 0.1]) @ Q.T
    K = 0.5 * (K + K.T)
    lam = ntk.max_eigs([K], max_iters=256)[0]
    assert abs(lam - 1.0) <= 1e-10

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference, max_rel_error
from sail_lab import nn
from sail_lab.errors import ContractError, DimensionError, NonFiniteError
from sail_lab.nn import Adam, DiagGaussian, Mlp, Tensor


def _grad_of(build, x):
    t = Tensor(x, requires_grad=True)
    nn.backward(build(t))
    return t.grad


UNARY_CASES = {
    "exp": (lambda t: nn.texp(t).sum(), lambda x: np.exp(x).sum()),
    "log": (lambda t: nn.tlog(t * t + 1.0).sum(), lambda x: np.log(x * x + 1.0).sum()),
    "sqrt": (lambda t: nn.tsqrt(t * t + 0.5).sum(), lambda x: np.sqrt(x * x + 0.5).sum()),
    "power": (lambda t: ((t * t + 1.0) ** 1.5).sum(), lambda x: ((x * x + 1.0) ** 1.5).sum()),
    "div": (lambda t: (1.0 / (t * t + 2.0)).sum(), lambda x: (1.0 / (x * x + 2.0)).sum()),
    "mean_axis": (lambda t: (t.mean(axis=0) ** 2).sum(), lambda x: (x.mean(axis=0) ** 2).sum()),
    "take": (lambda t: (t[np.array([0, 0, 2])] * 3.0).sum(), lambda x: (x[[0, 0, 2]] * 3.0).sum()),
    "transpose": (lambda t: (t.T @ t).sum(), lambda x: (x.T @ x).sum()),
    "concat": (lambda t: (nn.concat([t, t * 2.0], axis=-1) ** 2).sum(),
               lambda x: (np.concatenate([x, 2 * x], axis=-1) ** 2).sum()),
    "relu": (lambda t: (nn.relu(t) * t).sum(), lambda x: (np.maximum(x, 0) * x).sum()),
    "clip": (lambda t: (nn.clip(t, -0.5, 0.5) * t).sum(), lambda x: (np.clip(x, -0.5, 0.5) * x).sum()),
    "minimum": (lambda t: nn.minimum(t, t * t).sum(), lambda x: np.minimum(x, x * x).sum()),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    build, ref = UNARY_CASES[name]
    for _ in range(5):
        x = rng.normal(size=(3, 4))
        # keep away from the kinks of relu/clip/minimum where FD is meaningless
        x[np.abs(x) < 0.05] += 0.2
        x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.2
        x[np.abs(x - 1.0) < 0.05] += 0.2
        assert max_rel_error(_grad_of(build, x), central_difference(ref, x)) < 1e-6


def test_broadcast_add_mul_unbroadcast_gradients(rng):
    x = rng.normal(size=(5, 3))
    b = rng.normal(size=3)
    tb = Tensor(b, requires_grad=True)
    tx = Tensor(x, requires_grad=True)
    nn.backward(((tx + tb) * tb).sum())
    np.testing.assert_allclose(tb.grad, central_difference(lambda v: ((x + v) * v).sum(), b), rtol=1e-7)
    np.testing.assert_allclose(tx.grad, np.broadcast_to(b, x.shape), rtol=1e-12)


def test_gradient_accumulates_over_reuse():
    t = Tensor(np.array([2.0]), requires_grad=True)
    nn.backward((t * t + t * 3.0).sum())
    assert t.grad[0] == pytest.approx(7.0)


def test_backward_rejects_non_scalar_and_consumed_tape():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nn.backward(t * 2.0)
    loss = (t * 2.0).sum()
    nn.backward(loss)
    with pytest.raises(ContractError):
        nn.backward(loss)


def test_no_tape_without_requires_grad():
    out = Tensor(np.ones(2)) * 3.0
    assert not out.requires_grad and out._parents == ()


def test_mlp_parameter_gradients_match_fd(rng):
    net = nn.make_mlp(3, 2, hidden=8, depth=2, rng=rng)
    x = rng.normal(size=(6, 3))
    target = rng.normal(size=(6, 2))
    net.zero_grad()
    diff = net(x) - target
    nn.backward((diff * diff).mean())
    analytic = np.concatenate([p.grad.ravel() for p in net.parameters()])

    def loss(flat):
        clone = net.copy()
        clone.set_flat(flat)
        return float(np.mean((clone.predict(x) - target) ** 2))

    assert max_rel_error(analytic, central_difference(loss, net.get_flat())) < 1e-4


def test_input_gradient_matches_fd(rng):
    net = nn.make_mlp(4, 1, hidden=16, depth=3, rng=rng)
    x = rng.normal(size=(5, 4))
    g = nn.input_gradient(net, x).data
    for i in range(len(x)):
        fd = central_difference(lambda v: float(net.predict(v[None, :])[0, 0]), x[i])
        assert max_rel_error(g[i], fd) < 1e-6
    single = nn.input_gradient(net, x[0]).data
    np.testing.assert_allclose(single, g[0])


def test_gradient_penalty_second_order_matches_fd(rng):
    """d/dtheta of mean (||grad_x f||-1)^2 through input_gradient(create_graph=True)."""
    net = nn.make_mlp(3, 1, hidden=8, depth=2, rng=rng)
    x = rng.normal(size=(7, 3))

    def penalty_np(flat):
        clone = net.copy()
        clone.set_flat(flat)
        g = nn.input_gradient(clone, x).data
        return float(np.mean((np.linalg.norm(g, axis=1) - 1.0) ** 2))

    net.zero_grad()
    g = nn.input_gradient(net, x, create_graph=True)
    norms = nn.tsqrt((g * g).sum(axis=-1))
    nn.backward(((norms - 1.0) ** 2).mean())
    # biases only move the ReLU masks, so their exact gradient is zero
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                               for p in net.parameters()])
    assert max_rel_error(analytic, central_difference(penalty_np, net.get_flat())) < 1e-4


def test_input_gradient_contracts(rng):
    with pytest.raises(ContractError):
        nn.input_gradient(nn.make_mlp(2, 2, rng=rng), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        nn.input_gradient(nn.make_mlp(2, 1, rng=rng), np.zeros((1, 3)))


def test_mlp_dimension_error_names_layer_sizes(rng):
    net = Mlp([3, 4, 1], rng=rng)
    with pytest.raises(DimensionError, match=r"\[3, 4, 1\]"):
        net(np.zeros((2, 5)))
    with pytest.raises(ContractError):
        Mlp([3])


def test_flat_roundtrip_and_copy_independence(rng):
    net = nn.make_mlp(2, 3, hidden=5, depth=2, rng=rng)
    flat = net.get_flat()
    clone = net.copy()
    clone.set_flat(flat + 1.0)
    np.testing.assert_array_equal(net.get_flat(), flat)
    assert net.num_params() == flat.size == 2 * 5 + 5 + 5 * 5 + 5 + 5 * 3 + 3
    with pytest.raises(DimensionError):
        net.set_flat(np.zeros(flat.size + 1))


def test_adam_matches_hand_computed_steps():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    m = v = np.zeros(2)
    ref = p.data.copy()
    for t in range(1, 4):
        g = 2 * ref
        p.grad = 2 * p.data
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-14)


def test_adam_rejects_non_finite_gradient_without_moving():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        opt.step()
    assert p.data[0] == 1.0 and opt.state.step_count == 0


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        nn.adam_step([np.zeros(2)], [np.zeros(3)], nn.AdamState())


def test_gaussian_log_prob_closed_form():
    d = DiagGaussian(np.array([0.0, 1.0]), np.log(np.array([1.0, 2.0])))
    a = np.array([1.0, 0.0])
    expected = -0.5 * 1.0 - 0.5 * math.log(2 * math.pi) + (-0.5 * 0.25 - math.log(2.0) - 0.5 * math.log(2 * math.pi))
    assert nn.gaussian_log_prob(d, a) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(DimensionError):
        nn.gaussian_log_prob(d, np.zeros(3))


def test_kl_monte_carlo(rng):
    p = DiagGaussian(np.array([0.3, -0.2]), np.array([-0.5, 0.1]))
    q = DiagGaussian(np.array([0.0, 0.4]), np.array([0.0, -0.3]))
    xs = p.mean + p.std * rng.standard_normal((200000, 2))
    lp = np.sum(-0.5 * ((xs - p.mean) / p.std) ** 2 - p.log_std, axis=1)
    lq = np.sum(-0.5 * ((xs - q.mean) / q.std) ** 2 - q.log_std, axis=1)
    assert nn.gaussian_kl(p, q) == pytest.approx(np.mean(lp - lq), abs=0.01)


finite = st.floats(-3, 3, allow_nan=False)


@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=st.floats(-2, 1)),
       arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=st.floats(-2, 1)))
def test_kl_nonnegative_and_zero_on_self(mp, lp, mq, lq):
    p, q = DiagGaussian(mp, lp), DiagGaussian(mq, lq)
    assert nn.gaussian_kl(p, q) >= -1e-12
    assert nn.gaussian_kl(p, p) == pytest.approx(0.0, abs=1e-12)
    assert nn.kl_numpy(mp[None], lp[None], mq[None], lq[None])[0] == pytest.approx(nn.gaussian_kl(p, q), rel=1e-12,
                                                                                  abs=1e-12)


def test_tape_kl_and_log_prob_agree_with_numpy(rng):
    mean = rng.normal(size=(4, 2))
    ls = rng.normal(size=2) * 0.3
    acts = rng.normal(size=(4, 2))
    mq, lq = rng.normal(size=(4, 2)), rng.normal(size=2) * 0.3
    lp_t = nn.log_prob_tensor(Tensor(mean), Tensor(ls), acts).data
    for i in range(4):
        assert lp_t[i] == pytest.approx(nn.gaussian_log_prob(DiagGaussian(mean[i], ls), acts[i]), abs=1e-12)
    np.testing.assert_allclose(nn.kl_tensor(Tensor(mean), Tensor(ls), mq, lq).data,
                               nn.kl_numpy(mean, np.broadcast_to(ls, mean.shape), mq, lq), atol=1e-12)


def test_checkpoint_roundtrip_is_exact(tmp_path, rng):
    a = nn.make_mlp(3, 2, hidden=7, depth=2, rng=rng)
    b = nn.make_mlp(2, 1, hidden=4, depth=1, rng=rng)
    path = tmp_path / "m.ckpt"
    nn.write_checkpoint(path, {"a": a, "b": b}, {"v": np.array([np.pi, -1e-300]), "e": np.zeros(0)})
    nets, arrays_ = nn.read_checkpoint(path)
    for name, net in (("a", a), ("b", b)):
        np.testing.assert_array_equal(nets[name].get_flat(), net.get_flat())
        assert nets[name].layer_sizes == net.layer_sizes
    np.testing.assert_array_equal(arrays_["v"], [np.pi, -1e-300])
    assert arrays_["e"].size == 0
    text = path.read_text()
    nn.write_checkpoint(tmp_path / "again.ckpt", nets, arrays_)
    assert (tmp_path / "again.ckpt").read_text() == text


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text("hello\n")
    with pytest.raises(ContractError):
        nn.read_checkpoint(p)


def test_single_linear_layer_and_zero_weights():
    net = Mlp([1, 1])
    net.weights[0].data = np.array([[2.0]])
    net.biases[0].data = np.array([1.0])
    assert net(np.array([[3.0]])).data[0, 0] == 7.0
    z = nn.make_mlp(3, 2, hidden=4, depth=2, rng=np.random.default_rng(1))
    z.set_flat(np.zeros(z.num_params()))
    z.biases[-1].data = np.array([0.5, -1.5])
    np.testing.assert_array_equal(z.predict(np.random.default_rng(2).normal(size=(4, 3))), [[0.5, -1.5]] * 4)


def test_forward_matches_straight_line_oracle(rng):
    net = nn.make_mlp(3, 2, hidden=5, depth=2, rng=rng)
    x = rng.normal(size=(4, 3))
    (w0, b0), (w1, b1), (w2, b2) = [(w.data, b.data) for w, b in zip(net.weights, net.biases)]
    h = np.maximum(x @ w0 + b0, 0)
    h = np.maximum(h @ w1 + b1, 0)
    expected = h @ w2 + b2
    np.testing.assert_allclose(net(x).data, expected, atol=1e-12, rtol=0)
    np.testing.assert_allclose(net.predict(x), expected, atol=1e-12, rtol=0)
    assert np.array_equal(net.predict(x), net.predict(x))


def test_linear_loss_gradient_is_outer_structure(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = rng.normal(size=(1, 3))
    nn.backward((Tensor(x) @ w).sum())
    np.testing.assert_allclose(w.grad, np.outer(x[0], np.ones(2)))


def test_dead_relu_unit_passes_no_gradient():
    net = Mlp([1, 2, 1])
    net.weights[0].data = np.array([[1.0, -1.0]])
    net.biases[0].data = np.zeros(2)
    net.zero_grad()
    nn.backward(net(np.array([[2.0]])).sum())  # second unit has pre-activation -2
    assert net.weights[0].grad[0, 1] == 0.0 and net.weights[1].grad[1, 0] == 0.0
    assert net.weights[0].grad[0, 0] != 0.0


def test_input_gradient_linear_and_constant_nets():
    lin = Mlp([3, 1])
    w = np.array([0.3, -1.2, 2.0])
    lin.weights[0].data = w[:, None]
    np.testing.assert_allclose(nn.input_gradient(lin, np.ones((2, 3))).data, [w, w])
    const = nn.make_mlp(3, 1, hidden=4, depth=2, rng=np.random.default_rng(0))
    const.weights[-1].data[:] = 0.0
    np.testing.assert_array_equal(nn.input_gradient(const, np.ones((1, 3))).data, np.zeros((1, 3)))


def test_log_prob_standard_normal_mode_and_normalization(rng):
    assert nn.gaussian_log_prob(DiagGaussian([0.0], [0.0]), [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)
    d = DiagGaussian(rng.normal(size=2), rng.uniform(-1, 0.5, size=2))
    at_mean = nn.gaussian_log_prob(d, d.mean)
    for _ in range(20):
        assert nn.gaussian_log_prob(d, d.mean + rng.normal(size=2) * 0.3) < at_mean
    # quadrature: the 2-D density integrates to one on a wide grid
    axes = [np.linspace(m - 8 * s, m + 8 * s, 201) for m, s in zip(d.mean, d.std)]
    gx, gy = np.meshgrid(*axes, indexing="ij")
    dens = np.exp([[nn.gaussian_log_prob(d, [a, b]) for a, b in zip(ra, rb)] for ra, rb in zip(gx, gy)])
    total = np.trapezoid(np.trapezoid(dens, axes[1], axis=1), axes[0])
    assert total == pytest.approx(1.0, abs=1e-3)


def test_kl_unit_shift_is_half():
    assert nn.gaussian_kl(DiagGaussian([1.0], [0.0]), DiagGaussian([0.0], [0.0])) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo_within_three_standard_errors():
    rng = np.random.default_rng(7)
    for _ in range(3):
        p = DiagGaussian(rng.normal(size=3), rng.uniform(-0.7, 0.3, size=3))
        q = DiagGaussian(rng.normal(size=3), rng.uniform(-0.7, 0.3, size=3))
        xs = p.mean + p.std * rng.standard_normal((10**6, 3))
        diff = (np.sum(-0.5 * ((xs - p.mean) / p.std) ** 2 - p.log_std, axis=1)
                - np.sum(-0.5 * ((xs - q.mean) / q.std) ** 2 - q.log_std, axis=1))
        se = diff.std() / np.sqrt(diff.size)
        assert abs(diff.mean() - nn.gaussian_kl(p, q)) < 3 * se


def test_log_std_is_clamped():
    d = DiagGaussian([0.0, 0.0], [-50.0, 50.0])
    np.testing.assert_array_equal(d.log_std, [nn.LOG_STD_MIN, nn.LOG_STD_MAX])


def test_adam_zero_gradient_and_zero_lr_are_identity(rng):
    params = [rng.normal(size=(2, 3)), rng.normal(size=4)]
    out, _ = nn.adam_step(params, [np.zeros((2, 3)), np.zeros(4)], nn.AdamState(lr=0.1))
    for a, b in zip(out, params):
        np.testing.assert_array_equal(a, b)
    state = nn.AdamState(lr=0.0)
    for _ in range(3):
        out, state = nn.adam_step(params, [rng.normal(size=(2, 3)), rng.normal(size=4)], state)
        for a, b in zip(out, params):
            np.testing.assert_array_equal(a, b)
    assert state.step_count == 3 and all(np.all(v >= 0) for v in state.second_moment)


def test_adam_first_step_moves_by_lr_times_sign():
    g = np.array([3.0, -0.02, 150.0])
    out, _ = nn.adam_step([np.zeros(3)], [g], nn.AdamState(lr=0.01))
    np.testing.assert_allclose(out[0], -0.01 * np.sign(g), rtol=1e-5)


def test_adam_ten_steps_match_scalar_oracle():
    """Independent scalar Adam on f(x) = (x - 3)^2 / 2 per coordinate."""
    x0 = np.array([0.5, -4.0, 10.0])
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    expected = []
    for v in x0:
        x, m, s = float(v), 0.0, 0.0
        for t in range(1, 11):
            g = x - 3.0
            m = b1 * m + (1 - b1) * g
            s = b2 * s + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (math.sqrt(s / (1 - b2**t)) + eps)
        expected.append(x)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = Adam([p], lr=lr)
    for _ in range(10):
        opt.zero_grad()
        nn.backward(((p - 3.0) * (p - 3.0) * 0.5).sum())
        opt.step()
    np.testing.assert_allclose(p.data, expected, atol=1e-10, rtol=0)

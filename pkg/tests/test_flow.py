import numpy as np
import pytest

from causaldg.autodiff import Tensor, zero_grad
from causaldg.flow import MtaFlowStack, MtaLayer
from causaldg.losses import flow_nll, hsic_permutation_threshold
from causaldg.optim import AdamState, adam_step
from oracles import assert_grads_close


def _randomized_layer(seed, cond_dim=2, width=8) -> MtaLayer:
    rng = np.random.default_rng(seed)
    layer = MtaLayer(cond_dim=cond_dim, width=width, cond_hidden=16, rng=rng)
    for p in layer.params():
        p.data = rng.normal(size=p.shape) * 0.4
    return layer


def _affine_layer(a_raw=1.3, b=0.7, cond_dim=1) -> MtaLayer:
    """Layer whose bump weights are exactly zero: z = a*y + b."""
    layer = MtaLayer(cond_dim=cond_dim, width=4, cond_hidden=8, rng=np.random.default_rng(0))
    for p in layer.params():
        p.data[:] = 0.0
    layer.conditioner.biases[-1].data[0] = a_raw
    layer.conditioner.biases[-1].data[1] = b
    return layer


def test_zero_bump_weights_give_pure_affine():
    layer = _affine_layer()
    y = Tensor(np.linspace(-3, 3, 11)[:, None])
    cond = Tensor(np.zeros((11, 1)))
    z, logderiv = layer.tau_forward(y, cond)
    a = np.logaddexp(0.0, 1.3) + 1e-3
    np.testing.assert_allclose(z.data[:, 0], a * y.data[:, 0] + 0.7, atol=1e-12)
    np.testing.assert_allclose(logderiv.data, np.log(a), atol=1e-12)


def test_identity_configuration():
    import math

    layer = _affine_layer(a_raw=math.log(math.expm1(1.0 - 1e-3)), b=0.0)
    y = Tensor(np.linspace(-2, 2, 7)[:, None])
    z, logderiv = layer.tau_forward(y, Tensor(np.zeros((7, 1))))
    np.testing.assert_allclose(z.data, y.data, atol=1e-12)
    np.testing.assert_allclose(logderiv.data, 0.0, atol=1e-12)


def test_affine_inverse_is_exact():
    layer = _affine_layer()
    z = np.array([-2.0, 0.0, 5.0])
    cond = np.zeros((3, 1))
    a = np.logaddexp(0.0, 1.3) + 1e-3
    np.testing.assert_allclose(layer.tau_inverse(z, cond), (z - 0.7) / a, atol=1e-12)


def test_logderiv_matches_finite_difference_of_tau():
    layer = _randomized_layer(3)
    rng = np.random.default_rng(4)
    y = rng.normal(size=20) * 2
    cond = rng.normal(size=(20, 2))
    h = 1e-6
    z_up, _ = layer.tau_forward(Tensor((y + h)[:, None]), Tensor(cond))
    z_dn, _ = layer.tau_forward(Tensor((y - h)[:, None]), Tensor(cond))
    fd = (z_up.data - z_dn.data) / (2 * h)
    _, logderiv = layer.tau_forward(Tensor(y[:, None]), Tensor(cond))
    np.testing.assert_allclose(np.exp(logderiv.data), fd, atol=1e-6)


def test_round_trip_ten_thousand_draws():
    stack = MtaFlowStack(cond_dim=2, n_layers=2, width=16, rng=np.random.default_rng(5))
    for p in stack.params():
        p.data += np.random.default_rng(6).normal(size=p.shape) * 0.3
    rng = np.random.default_rng(7)
    y = rng.normal(size=10_000) * 3
    cond = rng.normal(size=(10_000, 2))
    z, _ = stack.forward(Tensor(y[:, None]), Tensor(cond))
    back = stack.inverse(z.data[:, 0], cond)
    assert np.max(np.abs(back - y)) < 1e-8


def test_monotonicity_on_random_layers():
    for seed in range(5):
        layer = _randomized_layer(seed)
        rng = np.random.default_rng(100 + seed)
        cond = np.repeat(rng.normal(size=(1, 2)), 64, axis=0)
        y = np.sort(rng.normal(size=64) * 4)
        z, _ = layer.tau_forward(Tensor(y[:, None]), Tensor(cond))
        assert np.all(np.diff(z.data[:, 0]) > 0)


def test_slope_positive_on_random_probes():
    total = 0
    for seed in range(10):
        layer = _randomized_layer(seed, cond_dim=1, width=8)
        rng = np.random.default_rng(200 + seed)
        n = 2000
        y = rng.normal(size=(n, 1)) * 5
        cond = rng.normal(size=(n, 1))
        _, logderiv = layer.tau_forward(Tensor(y), Tensor(cond))
        a, *_ = layer._params_np(cond)
        floor = a[:, 0] * (1.0 - layer.eps)
        assert np.all(np.exp(logderiv.data[:, 0]) >= floor - 1e-12)
        total += n
    assert total == 20_000


def test_stack_logdet_is_sum_of_layer_logdets():
    stack = MtaFlowStack(cond_dim=1, n_layers=3, width=8, rng=np.random.default_rng(8))
    for p in stack.params():
        p.data += np.random.default_rng(9).normal(size=p.shape) * 0.2
    rng = np.random.default_rng(10)
    y = rng.normal(size=12)
    cond = rng.normal(size=(12, 1))
    z, logdet = stack.forward(Tensor(y[:, None]), Tensor(cond))
    h = 1e-6
    z_up, _ = stack.forward(Tensor((y + h)[:, None]), Tensor(cond))
    z_dn, _ = stack.forward(Tensor((y - h)[:, None]), Tensor(cond))
    fd = (z_up.data - z_dn.data) / (2 * h)
    np.testing.assert_allclose(np.exp(logdet.data), fd, atol=1e-6)


def test_flow_nll_gradients_through_stack():
    stack = MtaFlowStack(cond_dim=1, n_layers=2, width=4, cond_hidden=6, rng=np.random.default_rng(11))
    for p in stack.params():
        p.data += np.random.default_rng(12).normal(size=p.shape) * 0.3
    rng = np.random.default_rng(13)
    y = Tensor(rng.normal(size=(6, 1)))
    cond = Tensor(rng.normal(size=(6, 1)))

    def loss():
        z, ld = stack.forward(y, cond)
        return flow_nll(z, ld)

    assert_grads_close(loss, stack.params())


def test_non_finite_conditioner_output_aborts_with_layer_index():
    layer = _randomized_layer(1)
    layer.conditioner.biases[-1].data[0] = np.nan
    with pytest.raises(FloatingPointError, match="layer 0"):
        layer.tau_forward(Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 2))))


def test_identity_stack_sampling_mean_near_zero():
    import math

    layer = _affine_layer(a_raw=math.log(math.expm1(1.0 - 1e-3)), b=0.0)
    stack = MtaFlowStack(cond_dim=1, n_layers=1, width=4, rng=np.random.default_rng(0))
    stack.layers = [layer]
    draws = stack.sample_conditional(np.zeros((3, 1)), 512, np.random.default_rng(14))
    assert draws.shape == (3, 512)
    assert np.all(np.abs(draws.mean(axis=1)) < 3.0 / np.sqrt(512))


@pytest.fixture(scope="module")
def trained_conditional_stack():
    """2-layer stack fit to y = x + N(0, 0.1^2); reused by several checks."""
    rng = np.random.default_rng(0)
    n = 768
    x = rng.uniform(-2, 2, size=(n, 1))
    y = x[:, 0] + 0.1 * rng.standard_normal(n)
    stack = MtaFlowStack(cond_dim=1, n_layers=2, width=32, rng=np.random.default_rng(1))
    params = stack.params()
    state = AdamState(params, lr=3e-3)
    cond, yt = Tensor(x), Tensor(y[:, None])
    for _ in range(700):
        z, ld = stack.forward(yt, cond)
        loss = flow_nll(z, ld)
        zero_grad(params)
        loss.backward()
        adam_step(state)
    return stack, x, y


def test_trained_stack_tracks_conditional_mean(trained_conditional_stack):
    stack, _, _ = trained_conditional_stack
    xq = np.linspace(-2, 2, 200)[:, None]
    pred = stack.predict_mean(xq, 512, np.random.default_rng(2))
    assert np.mean((pred - xq[:, 0]) ** 2) < 0.05


def test_trained_stack_pushes_forward_to_standard_normal(trained_conditional_stack):
    stack, x, y = trained_conditional_stack
    z, _ = stack.forward(Tensor(y[:, None]), Tensor(x))
    assert abs(z.data.mean()) < 0.05
    assert abs(z.data.var() - 1.0) < 0.1


def test_trained_stack_residuals_independent_of_features(trained_conditional_stack):
    stack, x, y = trained_conditional_stack
    z, _ = stack.forward(Tensor(y[:, None]), Tensor(x))
    observed, threshold = hsic_permutation_threshold(
        z.data, x, 200, 0.95, np.random.default_rng(5)
    )
    assert observed < threshold

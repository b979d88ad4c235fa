import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cids.nn import (
    Adam,
    AdamState,
    DenseNet,
    GaussianHead,
    adam_step,
    dumps_checkpoint,
    finite_diff_check,
    gaussian_nll,
    gaussian_nll_grad,
    head_size,
    init_mlp,
    load_checkpoint,
    loads_checkpoint,
    mixture_nll,
    save_checkpoint,
    soft_update,
)

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def gaussian_loss(target):
    def loss_fn(out):
        d = target.shape[1]
        head = GaussianHead(out[:, :d], out[:, d:])
        d_mean, d_lv = gaussian_nll_grad(target, head, out[:, d:])
        return gaussian_nll(target, head).sum(), np.concatenate([d_mean, d_lv], axis=1)

    return loss_fn


def mixture_loss(target, k):
    def loss_fn(out):
        nll, jac = mixture_nll(target, out, k)
        return nll.sum(), jac(np.ones_like(nll))

    return loss_fn


def test_parameter_count():
    net = init_mlp(4, 2)
    assert net.n_params() == 4 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 2 + 2


def test_same_seed_same_weights():
    a, b = init_mlp(3, 2, hidden=16, seed=5), init_mlp(3, 2, hidden=16, seed=5)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    c = init_mlp(3, 2, hidden=16, seed=6)
    assert not np.array_equal(a.params[0], c.params[0])


def test_zero_input_gives_zero_output():
    net = init_mlp(5, 3, hidden=32)
    np.testing.assert_array_equal(net.forward(np.zeros(5)), np.zeros(3))


def test_input_width_checked():
    with pytest.raises(ValueError, match="features"):
        init_mlp(3, 1, hidden=4).forward(np.zeros((2, 4)))


def test_backward_requires_forward():
    with pytest.raises(RuntimeError):
        init_mlp(3, 1, hidden=4).backward(np.ones((1, 1)))


def test_dead_relu_passes_no_gradient():
    W0 = np.array([[1.0, -1.0]])
    net = DenseNet([1, 2, 1], [W0, np.zeros(2), np.array([[1.0], [1.0]]), np.zeros(1)])
    net.forward(np.array([[2.0]]))
    grads, g_in = net.backward(np.ones((1, 1)))
    assert grads[0][0, 1] == 0.0
    assert grads[0][0, 0] == 2.0
    assert g_in[0, 0] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_finite_differences_gaussian_head(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp(3, 4, hidden=6, hidden_layers=2, seed=seed)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))
    assert finite_diff_check(net, gaussian_loss(target), x) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_finite_differences_mixture_head(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp(3, head_size(2, 3), hidden=6, hidden_layers=2, seed=seed)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 2))
    assert finite_diff_check(net, mixture_loss(target, 3), x) < 1e-4


def test_linear_net_is_exact():
    rng = np.random.default_rng(0)
    net = DenseNet([3, 2], [rng.normal(size=(3, 2)), rng.normal(size=2)])
    x = rng.normal(size=(4, 3))
    assert finite_diff_check(net, lambda y: (0.5 * (y ** 2).sum(), y), x) < 1e-7


def test_finite_diff_rejects_nonpositive_eps():
    net = init_mlp(2, 1, hidden=2)
    with pytest.raises(ValueError):
        finite_diff_check(net, lambda y: (y.sum(), np.ones_like(y)), np.ones((1, 2)), eps=0.0)


@pytest.mark.parametrize("offset, expected", [(0.0, HALF_LOG_2PI), (1.0, HALF_LOG_2PI + 0.5)])
def test_unit_gaussian_nll(offset, expected):
    head = GaussianHead(np.zeros((1, 3)), np.zeros((1, 3)))
    assert gaussian_nll(np.full((1, 3), offset), head)[0] == pytest.approx(3 * expected, abs=1e-12)


def test_gradient_vanishes_at_mean():
    head = GaussianHead(np.array([[0.3, -1.0]]), np.array([[0.2, -0.5]]))
    d_mean, _ = gaussian_nll_grad(head.mean, head)
    np.testing.assert_array_equal(d_mean, 0.0)


def test_logvar_clamp():
    head = GaussianHead(np.zeros(1), np.array([50.0]))
    assert head.logvar[0] == 8.0
    _, d_lv = gaussian_nll_grad(np.ones(1), head, np.array([50.0]))
    assert d_lv[0] == 0.0


@given(st.integers(0, 2**32 - 1))
def test_single_component_mixture_matches_gaussian(seed):
    rng = np.random.default_rng(seed)
    out = rng.normal(size=(6, 4))
    target = rng.normal(size=(6, 2))
    nll, _ = mixture_nll(target, out, 1)
    np.testing.assert_allclose(nll.sum(axis=1), gaussian_nll(target, GaussianHead.from_output(out)), rtol=1e-12)


def test_mixture_head_shape_checked():
    with pytest.raises(ValueError):
        mixture_nll(np.zeros((2, 2)), np.zeros((2, 7)), 3)


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    adam_step(p, [np.zeros(2)], 0.1, AdamState.like(p))
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


@pytest.mark.parametrize("g", [0.5, -3.0, 1e3])
def test_adam_first_step_moves_by_lr(g):
    p = [np.zeros(3)]
    adam_step(p, [np.full(3, g)], 0.01, AdamState.like(p))
    np.testing.assert_allclose(p[0], -0.01 * np.sign(g), rtol=1e-6)


def test_adam_zero_lr_is_noop():
    p = [np.array([0.7])]
    opt = Adam(p, lr=0.0)
    opt.step([np.array([4.0])])
    assert p[0][0] == 0.7


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], 0.1, AdamState.like(p))


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -4.0])]
    opt = Adam(p, lr=0.05)
    for _ in range(2000):
        opt.step([2 * p[0]])
    np.testing.assert_allclose(p[0], 0.0, atol=1e-2)


def test_soft_update_tau_one_copies():
    a, b = init_mlp(2, 2, hidden=4, seed=0), init_mlp(2, 2, hidden=4, seed=1)
    soft_update(a, b, 1.0)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))


def test_checkpoint_round_trip(tmp_path):
    nets = {"actor": init_mlp(3, 2, hidden=5, seed=1), "critic": init_mlp(5, 1, hidden=5, hidden_layers=2, seed=2)}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, nets)
    back = load_checkpoint(path)
    assert path.read_text().startswith("cids-ckpt v1\n")
    for name, net in nets.items():
        assert back[name].sizes == net.sizes
        assert all(np.array_equal(p, q) for p, q in zip(back[name].params, net.params))
    assert dumps_checkpoint(back) == dumps_checkpoint(nets)


def test_bad_checkpoint():
    with pytest.raises(ValueError):
        loads_checkpoint("something else\n")

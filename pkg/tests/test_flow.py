import math

import numpy as np
import pytest

from mtgflow import gradengine as ge
from mtgflow.errors import ConfigError
from mtgflow.flow import (
    LOG_2PI,
    FlowStack,
    MAFBlock,
    forward_transform,
    init_flow,
    init_targets,
    inverse_transform,
    log_prob,
    made_masks,
)
from mtgflow.gradengine import ParamStore, Tensor


def _stack(M, cond_dim=3, blocks=1, hidden=16, seed=0, scale=1.0):
    store = ParamStore(seed)
    stack = init_flow(store, M, cond_dim, blocks, hidden)
    for name in store.names():
        store[name].data = store[name].data * scale
    return stack, store


def _zero_outputs(stack):
    for b in stack.blocks:
        b.W_out.data[:] = 0
        b.U_out.data[:] = 0
        b.b_out.data[:] = 0


def _numeric_jacobian(fn, x, eps=1e-6):
    M = x.size
    J = np.empty((M, M))
    for j in range(M):
        d = np.zeros(M)
        d[j] = eps
        J[:, j] = (fn(x + d) - fn(x - d)) / (2 * eps)
    return J


def test_masks_are_strictly_autoregressive():
    for M, hidden in [(1, 4), (2, 4), (5, 7), (8, 16), (60, 64)]:
        mask_in, mask_out = made_masks(M, hidden)
        reach = (mask_in @ mask_out) > 0  # input j -> output i
        assert not np.any(np.triu(reach.T, k=0)), (M, hidden)


def test_identity_flow():
    stack, _ = _stack(5, blocks=2)
    _zero_outputs(stack)
    x = np.random.default_rng(0).standard_normal((4, 5))
    z, ld = forward_transform(x, np.random.default_rng(1).standard_normal((4, 5, 3)), stack)
    assert np.array_equal(z.data, x)
    assert np.all(ld.data == 0)
    np.testing.assert_array_equal(inverse_transform(x, np.zeros((4, 5, 3)), stack), x)


def _hand_block():
    # hidden degrees 0,1,0,1: units 1 and 3 see x0
    W_in = np.zeros((2, 4))
    W_in[0, 1], W_in[0, 3] = 1.0, -1.0
    W_out = np.zeros((4, 4))
    W_out[1, 1], W_out[3, 1] = 1.0, -1.0  # shift_1 = relu(x0) - relu(-x0) = x0
    b_out = np.zeros(4)
    b_out[0] = 0.5  # shift_0
    return MAFBlock(Tensor(W_in), Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)), Tensor(W_out),
                    Tensor(np.zeros((1, 2))), Tensor(b_out))


@pytest.mark.parametrize("x0,x1", [(1.3, -0.4), (-2.0, 0.7), (0.0, 5.0)])
def test_hand_set_block(x0, x1):
    stack = FlowStack([_hand_block()])
    cond = np.zeros((2, 1))
    z, ld = forward_transform(np.array([x0, x1]), cond, stack)
    np.testing.assert_allclose(z.data[0], [x0 - 0.5, x1 - x0], atol=1e-15)
    assert float(ld.data[0]) == 0.0
    # closed-form inverse: x0 = z0 + 0.5, x1 = z1 + x0
    zz = np.array([[0.2, -1.0]])
    np.testing.assert_allclose(inverse_transform(zz, cond, stack)[0], [0.7, -0.3], atol=1e-15)


@pytest.mark.parametrize("M", [2, 3, 4])
@pytest.mark.parametrize("blocks", [1, 2])
def test_logdet_matches_numeric_jacobian(M, blocks):
    stack, _ = _stack(M, blocks=blocks, seed=M + 10 * blocks, scale=1.5)
    rng = np.random.default_rng(M)
    cond = rng.standard_normal((M, 3))
    for _ in range(3):
        x = rng.standard_normal(M)
        J = _numeric_jacobian(lambda v: forward_transform(v, cond, stack)[0].data[0], x)
        _, ld = forward_transform(x, cond, stack)
        assert abs(float(ld.data[0]) - np.linalg.slogdet(J)[1]) < 1e-3


@pytest.mark.parametrize("reverse", [False, True])
def test_block_jacobian_sparsity(reverse):
    M = 6
    stack, _ = _stack(M, seed=3, scale=1.5)
    block = stack.blocks[0]
    block.reverse = reverse
    rng = np.random.default_rng(4)
    cond = rng.standard_normal((1, M, 3))
    for _ in range(5):
        x = rng.standard_normal(M)
        J = _numeric_jacobian(lambda v: block.forward(v[None, :], cond)[0].data[0], x)
        if reverse:
            J = J[::-1, ::-1]
        assert np.all(np.abs(np.triu(J, k=1)) < 1e-6)
        assert np.all(np.abs(np.diag(J)) > 0)


def test_round_trip_large_window():
    M = 60
    stack, _ = _stack(M, cond_dim=4, blocks=2, hidden=64, seed=7, scale=3.0)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((100, M)) * 2
    cond = rng.standard_normal((100, M, 4))
    z, _ = forward_transform(x, cond, stack)
    assert np.max(np.abs(inverse_transform(z.data, cond, stack) - x)) < 1e-5


def test_logscale_is_clamped():
    stack, _ = _stack(4, seed=1, scale=200.0)
    x = np.random.default_rng(2).standard_normal((10, 4))
    _, ld = forward_transform(x, np.ones((10, 4, 3)), stack)
    assert np.all(np.abs(ld.data) <= 7.0 * 4 + 1e-12)


def test_log_prob_at_mean():
    stack, _ = _stack(60, blocks=1, hidden=64)
    _zero_outputs(stack)
    mu = np.full(60, 0.37)
    lp = log_prob(mu, np.zeros((60, 3)), stack, mu).data[0]
    assert lp == pytest.approx(-30 * math.log(2 * math.pi), abs=1e-9)
    assert lp == pytest.approx(-55.1363, abs=1e-4)


def test_log_prob_one_dim_offset():
    stack, _ = _stack(1, hidden=4)
    _zero_outputs(stack)
    lp = log_prob(np.array([1.25]), np.zeros((1, 3)), stack, np.array([0.25])).data[0]
    assert lp == pytest.approx(-0.5 - 0.5 * LOG_2PI, abs=1e-12)


def test_trained_one_dim_density_integrates_to_one():
    stack, store = _stack(1, cond_dim=2, hidden=8, seed=5)
    rng = np.random.default_rng(6)
    data = np.concatenate([rng.normal(-1.5, 0.4, 200), rng.normal(2.0, 0.7, 200)])[:, None]
    cond = np.tile([0.3, -0.8], (len(data), 1, 1))
    for _ in range(200):
        store.zero_grad()
        (-ge.mean(log_prob(data, cond, stack, np.zeros(1)))).backward()
        ge.adam_step(store, 0.01)
    grid = np.arange(-10.0, 10.0 + 5e-4, 1e-3)[:, None]
    dens = np.exp(log_prob(grid, np.tile([0.3, -0.8], (len(grid), 1, 1)), stack, np.zeros(1)).data)
    assert abs(np.trapezoid(dens, grid[:, 0]) - 1.0) < 1e-2


def test_targets_entity_mode():
    bank = init_targets("entity", 3, 10, seed=4)
    V = bank.mean_vectors()
    assert V.shape == (3, 10)
    assert np.all(V == V[:, :1])
    again = init_targets("entity", 3, 10, seed=4)
    assert np.array_equal(again.mean_vectors(), V)


def test_singleton_clusters_match_entity_mode():
    ent = init_targets("entity", 5, 8, seed=[2, 1])
    clu = init_targets("cluster", 5, 8, seed=[2, 1], assignments=np.arange(5))
    assert np.array_equal(ent.mean_vectors(), clu.mean_vectors())


def test_cluster_members_share_mean():
    bank = init_targets("cluster", 4, 6, seed=0, assignments=[0, 1, 0, 1])
    V = bank.mean_vectors()
    assert np.array_equal(V[0], V[2]) and np.array_equal(V[1], V[3])
    assert not np.array_equal(V[0], V[1])


def test_cluster_mode_requires_assignment():
    with pytest.raises(ConfigError):
        init_targets("cluster", 3, 4, seed=0)
    with pytest.raises(ConfigError):
        init_targets("cluster", 3, 4, seed=0, assignments=[0, 1])


def test_flow_gradients():
    stack, store = _stack(3, cond_dim=2, blocks=2, hidden=6, seed=9)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((4, 3))
    cond = rng.standard_normal((4, 3, 2))
    names = store.names()

    def f(ts):
        for n, t in zip(names, ts):
            setattr_block(stack, n, t)
        return ge.sum_(log_prob(x, cond, stack, np.full(3, 0.4)))

    point = [store[n].data.copy() for n in names]
    assert ge.grad_check(f, point, eps=1e-6) < 1e-6


def setattr_block(stack, name, tensor):
    _, b, field = name.split(".")
    setattr(stack.blocks[int(b)], field, tensor)


def test_output_ignores_later_conditions():
    M = 6
    stack, _ = _stack(M, cond_dim=2, seed=12, scale=1.5)
    block = stack.blocks[0]
    rng = np.random.default_rng(13)
    x = rng.standard_normal((1, M))
    cond = rng.standard_normal((1, M, 2))
    s0, a0 = block.conditioner(x, cond)
    for j in range(M):
        moved = cond.copy()
        moved[0, j] += 3.0
        s1, a1 = block.conditioner(x, moved)
        # coordinates before j are untouched, coordinate j itself may react
        np.testing.assert_array_equal(s1.data[0, :j], s0.data[0, :j])
        np.testing.assert_array_equal(a1.data[0, :j], a0.data[0, :j])
        assert not np.allclose(s1.data[0, j:], s0.data[0, j:])

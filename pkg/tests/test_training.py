import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepfbsde import autodiff as ad
from deepfbsde.nn import NetworkStack, init_stack
from deepfbsde.problems import preset
from deepfbsde.riccati import discrete_value
from deepfbsde.rollout import Rollout, TimeGrid, network_map, rollout, sample_increments
from deepfbsde.training import (TrainConfig, TrainHistory, _update_loss, estimate_y0, landscape, naive_loss,
                                naive_loss_cost_form, robust_loss, train)


def _batch(name="lq2d", N=5, M=64, seed=0):
    p = preset(name)
    g = TimeGrid(N, p.T)
    stack = init_stack(N, p.d, p.d, np.random.default_rng(seed))
    dW = sample_increments(g, M, np.random.default_rng(seed + 1), p.k)
    return p, g, stack, rollout(p, network_map(stack), g, dW)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="adam")
    with pytest.raises(ValueError):
        TrainConfig(M_train=1000, M_batch=512)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(method="naive-fixed-y0")
    with pytest.raises(ValueError):
        TrainConfig(variance_y0="batchC")
    assert TrainConfig().K_batch == 64


def test_robust_loss_without_penalty_is_batch_a_cost():
    _, _, _, r = _batch()
    a, b = r.rows(0, 32), r.rows(32, 64)
    loss, cost, var = robust_loss(a, b, 0.0)
    assert float(ad.value(loss)) == float(np.mean(ad.value(a.ycal0)))
    assert var >= 0


def test_robust_loss_penalty_uses_batch_b_mean():
    _, _, _, r = _batch()
    a, b = r.rows(0, 32), r.rows(32, 64)
    yb = ad.value(b.ycal0)
    loss, cost, var = robust_loss(a, b, 2.0)
    assert float(var) == pytest.approx(np.mean((yb - yb.mean()) ** 2), rel=1e-12)
    assert float(loss) == pytest.approx(float(cost) + 2.0 * float(var), rel=1e-14)
    ya = ad.value(a.ycal0)
    _, _, var_a = robust_loss(a, b, 2.0, variance_y0="batchA")
    assert float(var_a) == pytest.approx(np.mean((yb - ya.mean()) ** 2), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20), y0=st.floats(-3, 3))
def test_naive_loss_forms_agree(seed, y0):
    _, _, _, r = _batch(N=4, M=32, seed=seed)
    assert abs(float(naive_loss(r, y0)) - float(naive_loss_cost_form(r, y0))) < 1e-10


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**20), delta=st.floats(1e-3, 1.0))
def test_naive_loss_minimised_at_batch_mean(seed, delta):
    _, _, _, r = _batch(N=4, M=32, seed=seed)
    m = float(np.mean(ad.value(r.ycal0)))
    base = float(naive_loss(r, m))
    for y0 in (m - delta, m + delta):
        assert float(naive_loss(r, y0)) == pytest.approx(base + delta**2, rel=1e-9, abs=1e-12)


def test_non_finite_loss_aborts():
    r = Rollout(np.array([1.0, np.nan]), np.zeros(2), np.zeros(2), [], [])
    with pytest.raises(FloatingPointError):
        robust_loss(r, r, 1.0)
    with pytest.raises(FloatingPointError):
        naive_loss(r, 0.0)


def _flat_grad_check(problem, config, dW, stack, eps=1e-6, n_coords=250):
    """Central differences on a fixed random subset of parameters (always including y0)."""
    grid = TimeGrid(config.N, problem.T)
    named = stack.named_arrays()
    _, _, _, grads = _update_loss(problem, stack, config, grid, dW)

    def loss_at(params):
        return _update_loss(problem, NetworkStack.from_named(params, config.N, problem.d), config, grid, dW)[0]

    coords = [(k, i) for k, arr in named.items() for i in range(arr.size)]
    pick = np.random.default_rng(0).choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    chosen = [coords[j] for j in sorted(pick)] + [c for c in coords if c[0] == "y0"]
    fd, adj = [], []
    for key, i in chosen:
        up = {k: v.copy() for k, v in named.items()}
        down = {k: v.copy() for k, v in named.items()}
        up[key].reshape(-1)[i] += eps
        down[key].reshape(-1)[i] -= eps
        fd.append((loss_at(up) - loss_at(down)) / (2 * eps))
        adj.append(np.reshape(grads[key], -1)[i])
    fd, adj = np.array(fd), np.array(adj)
    # relative error with a floor at 1e-3 of the largest partial derivative
    scale = np.maximum(np.abs(fd), 1e-3 * np.abs(fd).max())
    return float(np.max(np.abs(adj - fd) / scale))


def test_full_robust_loss_gradient_matches_central_differences():
    p = preset("lq1d")
    config = TrainConfig(lam=0.7, N=5, M_train=8, M_batch=4)
    grid = TimeGrid(5, p.T)
    dW = sample_increments(grid, 8, np.random.default_rng(0), p.k)
    stack = init_stack(5, 1, 1, np.random.default_rng(1))
    assert _flat_grad_check(p, config, dW, stack) < 1e-4


def test_naive_loss_gradient_includes_y0():
    p = preset("lq1d")
    config = TrainConfig(method="naive", N=5, M_train=8, M_batch=4, y0=0.2)
    grid = TimeGrid(5, p.T)
    dW = sample_increments(grid, 8, np.random.default_rng(2), p.k)
    stack = init_stack(5, 1, 1, np.random.default_rng(3), y0=0.2)
    assert _flat_grad_check(p, config, dW, stack) < 1e-4


def test_every_increment_used_once_per_epoch():
    p = preset("lq1d")
    log = []
    cfg = TrainConfig(N=3, M_train=256, M_batch=16, K_epoch=3)
    train(cfg, p, draw_log=log)
    assert len(log) == cfg.K_epoch * cfg.K_batch
    for epoch in range(3):
        used = np.concatenate([idx for e, idx in log if e == epoch])
        assert np.array_equal(np.sort(used), np.arange(256))
    first = [idx for e, idx in log if e == 0][0]
    second = [idx for e, idx in log if e == 1][0]
    assert not np.array_equal(first, second)


def test_unshuffled_epochs_reuse_order():
    log = []
    train(TrainConfig(N=2, M_train=64, M_batch=16, K_epoch=2, shuffle=False), preset("lq1d"), draw_log=log)
    assert np.array_equal(log[0][1], log[2][1])


def test_training_is_bitwise_reproducible():
    cfg = TrainConfig(N=3, M_train=512, M_batch=32, K_epoch=2, seed=9)
    a, ha = train(cfg, preset("lq2d"))
    b, hb = train(cfg, preset("lq2d"))
    na, nb = a.named_arrays(), b.named_arrays()
    assert all(na[k].tobytes() == nb[k].tobytes() for k in na)
    assert [r.loss for r in ha.records] == [r.loss for r in hb.records]


def test_zero_epochs_returns_initialisation():
    cfg = TrainConfig(N=3, K_epoch=0, seed=4)
    stack, hist = train(cfg, preset("lq2d"))
    assert len(hist) == 0
    ref = init_stack(3, 2, 2, np.random.default_rng(np.random.SeedSequence(4).spawn(4)[0]))
    assert np.array_equal(stack.nets[0].W1, ref.nets[0].W1)


def test_warns_on_non_unique_markov_map():
    with pytest.warns(UserWarning, match="lambda=0"):
        train(TrainConfig(N=2, K_epoch=0, lam=0.0), preset("lq6d"))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train(TrainConfig(N=2, K_epoch=0, lam=0.0), preset("lq2d"))


def test_history_csv(tmp_path):
    _, hist = train(TrainConfig(N=2, M_train=64, M_batch=16, K_epoch=1), preset("lq1d"))
    path = tmp_path / "h.csv"
    hist.to_csv(path, extra={"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,batch,loss,cost_term,var_term,lr,seed"
    assert len(lines) == 1 + len(hist) and isinstance(hist, TrainHistory)


def test_short_training_approaches_discrete_optimum():
    p = preset("lq1d")
    cfg = TrainConfig(N=5, M_train=2**13, M_batch=2**8, K_epoch=4)
    stack, _ = train(cfg, p)
    y0, se = estimate_y0(stack, p, TimeGrid(5, p.T), 2**15, seed=1)
    assert se < 0.01
    assert y0 == pytest.approx(discrete_value(p, 5), abs=0.02)


def test_landscape_records_each_grid_point():
    p = preset("lq1d")
    cfg = TrainConfig(N=3, M_train=256, M_batch=32, K_epoch=1)
    pts = landscape(p, TimeGrid(3, p.T), [0.0, 0.3], cfg, M_eval=512)
    assert [pt.y0 for pt in pts] == [0.0, 0.3]
    assert all(pt.mse >= 0 for pt in pts)

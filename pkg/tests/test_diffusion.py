import numpy as np
import pytest

from skillmoe.diffusion import (ExpertDenoiser, coeff_diffusion_loss, denoise_sample, make_schedule, q_sample,
                                timestep_embedding)
from skillmoe.numcore import OptimizerState, Tape, Tensor, adamw_step, backward
from skillmoe.skillbasis import BasisNet, basis_forward, coeff_targets


def test_constant_beta_schedule():
    sched = make_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.81], atol=1e-15)
    assert make_schedule(1, 0.3, 0.3).alpha_bar[0] == pytest.approx(0.7)


@pytest.mark.parametrize("args", [(50, 1e-4, 0.02), (50, 2e-3, 0.4), (7, 0.05, 0.5)])
def test_schedule_consistency(args):
    sched = make_schedule(*args)
    assert 0 < sched.alpha_bar[-1] < 1
    assert np.all(np.diff(sched.alpha_bar) < 0)
    recomputed = np.array([np.prod(1 - sched.beta[:t + 1]) for t in range(sched.steps)])
    np.testing.assert_allclose(sched.alpha_bar, recomputed, rtol=0, atol=1e-12)
    assert np.all((sched.beta > 0) & (sched.beta < 1))


def test_default_schedule_reaches_noise():
    # leftover signal std sqrt(alpha_bar_T) below 0.1
    assert make_schedule().alpha_bar[-1] < 1e-2


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.3, 0.2), (5, 0.1, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_examples():
    sched = make_schedule(2, 0.1, 0.1)
    np.testing.assert_allclose(q_sample(np.array([1.0, 0.0]), 2, np.array([0.0, 1.0]), sched).data,
                               [0.9, np.sqrt(0.19)], atol=1e-15)
    assert np.sqrt(0.19) == pytest.approx(0.43589, abs=1e-5)
    z0 = np.array([0.4, -2.0])
    np.testing.assert_allclose(q_sample(z0, 1, np.zeros(2), sched).data, np.sqrt(0.9) * z0)
    tiny = make_schedule(50, 1e-8, 1e-8)
    np.testing.assert_allclose(q_sample(z0, 1, np.ones(2), tiny).data, z0, atol=1e-3)
    for bad in (0, 3):
        with pytest.raises(ValueError):
            q_sample(z0, bad, np.zeros(2), sched)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.arange(1, 51), 16)
    assert e.shape == (50, 16) and np.all(np.abs(e) <= 1)


def _zero_experts(K, d_s):
    ex = ExpertDenoiser(d_s=d_s, K=K, hidden=(8,))
    params = ex.init(np.random.default_rng(0))
    for p in params.values():
        p.data[:] = 0.0
    return ex, params


def test_zero_output_expert_loss_is_noise_energy():
    K, n = 4, 20_000
    ex, params = _zero_experts(K, 3)
    sched = make_schedule()
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((n, K))
    s = rng.standard_normal((n, 3))
    loss = float(coeff_diffusion_loss(ex, params, z0, s, sched, np.random.default_rng(2)).data)
    # per-row sum of K chi-square(1) draws: mean K, std sqrt(2K / n)
    assert abs(loss - K) < 3 * np.sqrt(2 * K / n)


def test_oracle_expert_has_zero_loss():
    """An expert that predicts exactly the drawn noise: replay the rng to build it."""
    K, n = 3, 16
    sched = make_schedule()
    rng = np.random.default_rng(3)
    z0 = rng.standard_normal((n, K))
    replay = np.random.default_rng(4)
    replay.integers(1, sched.steps + 1, size=n)  # the loss draws its timesteps first
    noise = replay.standard_normal((n, K))

    class Oracle(ExpertDenoiser):
        def predict(self, params, z, tau_, s, experts=None):
            return Tensor(noise)

    ex = Oracle(d_s=2, K=K)
    loss = coeff_diffusion_loss(ex, {}, z0, np.zeros((n, 2)), sched, np.random.default_rng(4))
    assert float(loss.data) == 0.0


def test_diffusion_loss_never_reaches_basis():
    rng = np.random.default_rng(5)
    net = BasisNet(d_s=3, d=4, K=2, hidden=(6,))
    bparams = net.init(rng)
    ex = ExpertDenoiser(d_s=3, K=2, hidden=(6,))
    eparams = ex.init(rng)
    for p in list(bparams.values()) + list(eparams.values()):
        p.requires_grad = True
    s = rng.standard_normal((5, 3))
    a = rng.standard_normal((5, 4))
    with Tape() as tape:
        z = coeff_targets(basis_forward(net, bparams, s).B, a, np.full((5, 2), 0.5)).z_sg
        loss = coeff_diffusion_loss(ex, eparams, z, s, make_schedule(), rng)
    g = backward(tape, loss)
    assert all(p not in g or np.all(g[p] == 0) for p in bparams.values())
    assert sum(np.abs(g[p]).sum() for p in eparams.values()) > 0


def test_per_expert_tau_flag():
    ex, params = _zero_experts(3, 2)
    z0 = np.ones((4, 3))
    loss = coeff_diffusion_loss(ex, params, z0, np.zeros((4, 2)), make_schedule(), np.random.default_rng(0),
                                per_expert_tau=True)
    assert np.isfinite(float(loss.data))


def test_predict_subset_matches_full():
    ex = ExpertDenoiser(d_s=2, K=4, hidden=(8,))
    params = ex.init(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z, s, tau = rng.standard_normal((5, 4)), rng.standard_normal((5, 2)), rng.integers(1, 51, 5)
    full = ex.predict(params, z, tau, s).data
    sub = ex.predict(params, z[:, [1, 3]], tau, s, experts=[1, 3]).data
    np.testing.assert_allclose(sub, full[:, [1, 3]], atol=1e-14)


def test_masking_and_determinism():
    ex = ExpertDenoiser(d_s=2, K=3, hidden=(8,))
    params = ex.init(np.random.default_rng(0))
    sched = make_schedule()
    s = np.array([0.2, -0.1])
    z = denoise_sample(ex, params, s, [1], sched, np.random.default_rng(7))
    assert z[0] == 0.0 and z[2] == 0.0 and z[1] != 0.0
    again = denoise_sample(ex, params, s, [1], sched, np.random.default_rng(7))
    assert z.tobytes() == again.tobytes()
    # an active expert's draw does not depend on which others are active
    both = denoise_sample(ex, params, s, [1, 2], sched, np.random.default_rng(7))
    assert both[1] == z[1] and both[0] == 0.0
    with pytest.raises(ValueError):
        denoise_sample(ex, params, s, [], sched, np.random.default_rng(7))
    with pytest.raises(ValueError):
        denoise_sample(ex, params, s, [3], sched, np.random.default_rng(7))


def test_trained_expert_recovers_constant_target():
    c = 0.7
    sched = make_schedule()
    ex = ExpertDenoiser(d_s=1, K=1, hidden=(32, 32))
    params = ex.init(np.random.default_rng(0))
    for p in params.values():
        p.requires_grad = True
    opt = OptimizerState(lr=3e-3, weight_decay=0.0)
    rng = np.random.default_rng(1)
    n = 256
    z0, s = np.full((n, 1), c), np.zeros((n, 1))
    for _ in range(1500):
        with Tape() as tape:
            loss = coeff_diffusion_loss(ex, params, z0, s, sched, rng)
        g = backward(tape, loss)
        adamw_step(params, {k: g[p] for k, p in params.items()}, opt)
    draws = denoise_sample(ex, params, np.zeros((100, 1)), [0], sched, np.random.default_rng(2))[:, 0]
    assert abs(draws.mean() - c) < 0.1


def test_coefficient_scale_is_a_change_of_units():
    ex1, params = _zero_experts(2, 3)
    ex4 = ExpertDenoiser(d_s=3, K=2, hidden=(8,), scale=4.0)
    sched = make_schedule(5, 0.05, 0.5)
    s = np.zeros(3)
    z1 = denoise_sample(ex1, params, s, [0, 1], sched, np.random.default_rng(3))
    z4 = denoise_sample(ex4, params, s, [0, 1], sched, np.random.default_rng(3))
    np.testing.assert_allclose(z4, z1 / 4.0, rtol=1e-14)
    z0 = np.random.default_rng(4).standard_normal((6, 2))
    # the loss sees scale * z0: a target 4x smaller at scale 4 gives the same loss
    a = coeff_diffusion_loss(ex1, params, z0, np.zeros((6, 3)), sched, np.random.default_rng(5))
    b = coeff_diffusion_loss(ex4, params, z0 / 4.0, np.zeros((6, 3)), sched, np.random.default_rng(5))
    assert float(a.data) == pytest.approx(float(b.data), rel=1e-14)
    with pytest.raises(ValueError):
        ExpertDenoiser(d_s=3, K=2, scale=0.0)

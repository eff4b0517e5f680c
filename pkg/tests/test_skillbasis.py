import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillmoe.numcore import Tape, Tensor, backward, grad_check
from skillmoe.skillbasis import (BasisNet, RankDeficientError, basis_forward, coeff_targets, decode_action,
                                 householder_qr, qr_sign_stable, sign_stabilize)


def gram_schmidt(W):
    """Classical Gram-Schmidt with a positive diagonal; the independent oracle."""
    W = np.asarray(W, dtype=float)
    Q = np.zeros_like(W)
    R = np.zeros((W.shape[1], W.shape[1]))
    for j in range(W.shape[1]):
        v = W[:, j].copy()
        for i in range(j):
            R[i, j] = Q[:, i] @ W[:, j]
            v -= R[i, j] * Q[:, i]
        R[j, j] = np.linalg.norm(v)
        Q[:, j] = v / R[j, j]
    return Q, R


def test_identity_is_fixed():
    sb = qr_sign_stable(np.eye(2))
    np.testing.assert_allclose(sb.B.data, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(sb.U_stable, np.eye(2), atol=1e-15)


def test_one_dimensional_sign():
    sb = qr_sign_stable(np.array([[-3.0]]))
    assert sb.B.data[0, 0] == pytest.approx(-1.0)
    assert sb.U_stable[0, 0] == pytest.approx(3.0)
    # any other convention for the raw factors lands on the same B
    assert sign_stabilize(np.array([[1.0]]), np.array([[-3.0]]))[0, 0] == -1.0
    assert sign_stabilize(np.array([[-1.0]]), np.array([[3.0]]))[0, 0] == -1.0


def test_hand_example():
    W = np.array([[0.0, -2.0], [1.0, 0.0], [0.0, 0.0]])
    sb = qr_sign_stable(W)
    np.testing.assert_allclose(sb.B.data, [[0.0, -1.0], [1.0, 0.0], [0.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(np.diag(sb.U_stable), [1.0, 2.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 10), k=st.integers(1, 10))
def test_matches_gram_schmidt_and_numpy(seed, d, k):
    if k > d:
        d, k = k, d
    W = np.random.default_rng(seed).standard_normal((d, k))
    sb = qr_sign_stable(W)
    Q_gs, R_gs = gram_schmidt(W)
    np.testing.assert_allclose(sb.B.data, Q_gs, atol=1e-8)
    np.testing.assert_allclose(sb.U_stable, R_gs, atol=1e-8)
    Q_np, R_np = np.linalg.qr(W)
    np.testing.assert_allclose(sb.B.data, sign_stabilize(Q_np, R_np), atol=1e-10)
    assert np.all(np.diag(sb.U_stable) >= 0)
    np.testing.assert_allclose(np.tril(sb.U.data, -1), 0.0)


def test_invariant_to_qr_sign_convention():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((6, 4))
    Q, R = np.linalg.qr(W)
    E = np.diag([1.0, -1.0, -1.0, 1.0])
    # (Q E, E R) is another valid thin QR of W
    np.testing.assert_allclose(sign_stabilize(Q @ E, E @ R), sign_stabilize(Q, R), atol=1e-14)


def test_negating_a_column_negates_that_basis_column():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((7, 3))
    B = qr_sign_stable(W).B.data
    for j in range(3):
        Wn = W.copy()
        Wn[:, j] *= -1
        Bn = qr_sign_stable(Wn).B.data
        expected = B.copy()
        expected[:, j] *= -1
        np.testing.assert_allclose(Bn, expected, atol=1e-12)


def test_batched_matches_single():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((5, 8, 3))
    batch = qr_sign_stable(W).B.data
    for i in range(5):
        np.testing.assert_allclose(batch[i], qr_sign_stable(W[i]).B.data, atol=1e-14)


def test_rank_deficiency_names_column():
    W = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(RankDeficientError) as exc:
        qr_sign_stable(W)
    assert exc.value.column == 1


def test_rejects_wide_matrix():
    with pytest.raises(ValueError):
        householder_qr(np.ones((2, 3)))


@pytest.mark.parametrize("d,k", [(1, 1), (3, 2), (5, 3), (8, 4)])
def test_qr_gradient_matches_finite_differences(d, k):
    rng = np.random.default_rng(d * 10 + k)
    W = rng.standard_normal((d, k))
    C = rng.standard_normal((d, k))

    def f(W):
        B = qr_sign_stable(W).B
        return (B * Tensor(C)).sum() + (B * B * B).sum()

    rep = grad_check(f, W, tolerance=1e-4)
    assert rep.passed, str(rep)


def test_orthonormal_over_many_nets_and_states():
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        net = BasisNet(d_s=5, d=6, K=4, hidden=(8,))
        params = net.mlp.init(rng)  # plain random init, no identity bias
        B = basis_forward(net, params, rng.standard_normal((1, 5))).B.data[0]
        worst = max(worst, np.abs(B.T @ B - np.eye(4)).max())
    assert worst < 1e-8


def test_constant_network_gives_identity_columns():
    net = BasisNet(d_s=3, d=5, K=2, hidden=(4,))
    params = net.init(np.random.default_rng(0))
    for name, p in params.items():
        if ".W" in name:
            p.data[:] = 0.0
        elif not name.endswith(f"b{net.mlp.n_layers - 1}"):
            p.data[:] = 0.0
    B = basis_forward(net, params, np.random.default_rng(1).standard_normal((4, 3))).B.data
    np.testing.assert_allclose(B, np.broadcast_to(np.eye(5, 2), (4, 5, 2)), atol=1e-15)


def test_basis_is_pure_and_lipschitz():
    net = BasisNet(d_s=4, d=6, K=3, hidden=(16, 16))
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = net.init(rng)
        s = rng.standard_normal((1, 4))
        B0 = basis_forward(net, params, s).B.data
        assert np.array_equal(B0, basis_forward(net, params, s).B.data)
        delta = rng.standard_normal((1, 4))
        delta *= 1e-6 / np.linalg.norm(delta)
        B1 = basis_forward(net, params, s + delta).B.data
        assert np.linalg.norm(B1 - B0) <= 1e3 * 1e-6


def test_decode_examples():
    B = np.eye(3)[:, :2]
    np.testing.assert_allclose(decode_action(B, [0.5, 0.5], [2.0, 4.0]).data, [1.0, 2.0, 0.0])
    np.testing.assert_array_equal(decode_action(B, [0.5, 0.5], [0.0, 0.0]).data, 0.0)
    Bq = qr_sign_stable(np.random.default_rng(0).standard_normal((5, 3))).B.data
    np.testing.assert_allclose(decode_action(Bq, [0.0, 1.0, 0.0], [0.0, -2.5, 0.0]).data, -2.5 * Bq[:, 1])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_decode_is_an_isometry(seed):
    rng = np.random.default_rng(seed)
    B = qr_sign_stable(rng.standard_normal((7, 4))).B.data
    g = rng.dirichlet(np.ones(4))
    z = rng.standard_normal(4) * 3
    a = decode_action(B, g, z).data
    assert abs(np.linalg.norm(a) - np.linalg.norm(g * z)) < 1e-10


def test_coeff_target_examples():
    B = np.eye(3)[:, :2]
    t = coeff_targets(B, np.array([1.0, 2.0, 0.0]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(t.z_sg.data, [1 / 0.501, 2 / 0.501])
    assert np.array_equal(t.z_sg.data, t.z_rec.data)
    np.testing.assert_allclose(t.z_sg.data, [1.9960, 3.9920], atol=1e-4)
    t = coeff_targets(B, np.array([0.0, 0.0, 5.0]), np.array([0.5, 0.5]))
    np.testing.assert_array_equal(t.z_sg.data, 0.0)
    np.testing.assert_array_equal(t.z_rec.data, 0.0)
    with pytest.raises(ValueError):
        coeff_targets(B, np.zeros(3), np.array([0.5, 0.5]), eps=0.0)


def test_stop_gradient_routing_to_basis_net():
    net = BasisNet(d_s=3, d=4, K=2, hidden=(6,))
    rng = np.random.default_rng(0)
    params = net.init(rng)
    for p in params.values():
        p.requires_grad = True
    s, a, g = rng.standard_normal((1, 3)), rng.standard_normal((1, 4)), np.array([[0.3, 0.7]])
    for which, expect_zero in (("z_sg", True), ("z_rec", False)):
        with Tape() as tape:
            t = coeff_targets(basis_forward(net, params, s).B, a, g)
            z = getattr(t, which)
            loss = (z * z).sum()
        grads = backward(tape, loss)
        total = sum(np.abs(grads.get(p, np.zeros(1))).sum() for p in params.values())
        assert (total == 0.0) == expect_zero


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_reconstruction_identity(seed):
    rng = np.random.default_rng(seed)
    B = qr_sign_stable(rng.standard_normal((6, 3))).B.data
    a = B @ rng.standard_normal(3)
    g = rng.dirichlet(np.ones(3))
    g = 0.1 + 0.7 * g  # every entry >= 0.1, sums to 1
    eps = 1e-3
    z = coeff_targets(B, a, g, eps).z_rec.data
    rebuilt = decode_action(B, g, z * (g + eps) / g).data
    assert np.linalg.norm(rebuilt - a) <= 1e-2 * np.linalg.norm(a)

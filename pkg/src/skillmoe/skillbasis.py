"""State-adaptive orthonormal skill basis.

A network maps state features to an unconstrained d x K matrix W(s), which a
sign-stabilized Householder thin-QR retracts onto the Stiefel manifold. The
retraction is written entirely in tape ops, so its gradient comes from
differentiating the reflection sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import MLP, Tensor, as_tensor, concat, sqrt, stack, stop_gradient, swapaxes, take


class RankDeficientError(ValueError):
    """W(s) lost column rank; ``column`` is the first degenerate column."""

    def __init__(self, column: int, norm: float):
        super().__init__(f"rank-deficient W: column {column} has residual norm {norm:.3e}")
        self.column = column
        self.norm = norm


RANK_TOL = 1e-10


@dataclass
class SkillBasis:
    B: Tensor      # (..., d, K) orthonormal columns
    U: Tensor      # (..., K, K) upper-triangular factor from the QR routine
    D: np.ndarray  # (..., K) signs of diag(U)

    @property
    def U_stable(self) -> np.ndarray:
        return self.D[..., :, None] * self.U.data


def _sign(x: np.ndarray) -> np.ndarray:
    # sign(0) counts as +1
    return np.where(x >= 0.0, 1.0, -1.0)


def householder_qr(W) -> tuple[Tensor, Tensor]:
    """Thin QR of a (batched) d x K matrix by Householder reflections.

    Returns the raw factors (Q, U) with U = diag(-sign(x_jj) * ||x_j||), the
    usual Householder convention; callers wanting a canonical sign use
    :func:`qr_sign_stable`.
    """
    W = as_tensor(W)
    d, K = W.shape[-2], W.shape[-1]
    if K < 1 or d < K:
        raise ValueError(f"need d >= K >= 1, got d={d}, K={K}")
    batch = W.shape[:-2]
    # columns are stored as rows so every reduction runs over the last axis;
    # reflection j leaves columns < j of R untouched, so they are split off
    pending = swapaxes(W, -1, -2)                                    # (..., K - j, d)
    finished, vs = [], []
    rows = np.arange(d)
    for j in range(K):
        mask = (rows >= j).astype(np.float64)
        x = take(pending, (Ellipsis, 0, slice(None))) * mask          # (..., d)
        normx = sqrt((x * x).sum(axis=-1, keepdims=True))            # (..., 1)
        n = normx.data[..., 0]
        if np.any(n <= RANK_TOL):
            raise RankDeficientError(j, float(n.min()))
        s = _sign(x.data[..., j])[..., None]
        e = np.zeros(d)
        e[j] = 1.0
        v = x + (s * e) * normx
        v = v / sqrt((v * v).sum(axis=-1, keepdims=True))
        vr = v.reshape(batch + (1, d))
        pending = pending - 2.0 * (pending * vr).sum(axis=-1, keepdims=True) * vr
        finished.append(take(pending, (Ellipsis, 0, slice(None))))
        pending = take(pending, (Ellipsis, slice(1, None), slice(None)))
        vs.append(vr)

    # Q = H_0 ... H_{K-1} [e_0 .. e_{K-1}]; H_i fixes e_c for c < i, so the
    # block of touched columns grows by one per reflection
    block = None
    for j in reversed(range(K)):
        e = np.zeros(batch + (1, d))
        e[..., 0, j] = 1.0
        block = Tensor(e) if block is None else concat([Tensor(e), block], axis=-2)
        block = block - 2.0 * (block * vs[j]).sum(axis=-1, keepdims=True) * vs[j]
    Q = swapaxes(block, -1, -2)
    U = take(stack(finished, axis=-1), (Ellipsis, slice(0, K), slice(None))) * np.triu(np.ones((K, K)))
    return Q, U


def qr_sign_stable(W) -> SkillBasis:
    """B = Q D with D = diag(sign(diag U)): invariant to the QR sign convention."""
    Q, U = householder_qr(W)
    K = U.shape[-1]
    diag = U.data[..., np.arange(K), np.arange(K)]
    D = _sign(diag)
    B = Q * D[..., None, :]
    return SkillBasis(B=B, U=U, D=D)


def sign_stabilize(Q: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Sign-stabilized basis from any externally computed thin-QR pair."""
    K = U.shape[-1]
    D = _sign(U[..., np.arange(K), np.arange(K)])
    return Q * D[..., None, :]


@dataclass(frozen=True)
class BasisNet:
    """MLP from state features to vec(W(s)), row-major d x K."""

    d_s: int
    d: int
    K: int
    hidden: tuple[int, ...] = (128, 128)
    prefix: str = "basis"

    @property
    def mlp(self) -> MLP:
        return MLP(self.prefix, (self.d_s, *self.hidden, self.d * self.K))

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params = self.mlp.init(rng)
        last = self.mlp.n_layers - 1
        params[f"{self.prefix}.b{last}"].data[:] = np.eye(self.d, self.K).reshape(-1)
        return params

    def raw(self, params: dict[str, Tensor], s) -> Tensor:
        s = as_tensor(s)
        W = self.mlp(params, s)
        return W.reshape(s.shape[:-1] + (self.d, self.K))


def basis_forward(net: BasisNet, params: dict[str, Tensor], s, jitter_seed: int = 0) -> SkillBasis:
    """B(s) = qr_sign_stable(BasisNet(s)), with one jittered retry on rank loss."""
    W = net.raw(params, s)
    try:
        return qr_sign_stable(W)
    except RankDeficientError:
        rng = np.random.default_rng(jitter_seed)
        return qr_sign_stable(W + 1e-8 * rng.standard_normal(W.shape))


def decode_action(B, g, z) -> Tensor:
    """a = B (g * z), batched over leading axes."""
    B, g, z = as_tensor(B), as_tensor(g), as_tensor(z)
    u = g * z
    return (B * u.reshape(u.shape[:-1] + (1, u.shape[-1]))).sum(axis=-1)


def project(B, a) -> Tensor:
    """B^T a, batched."""
    B, a = as_tensor(B), as_tensor(a)
    return (B * a.reshape(a.shape + (1,))).sum(axis=-2)


@dataclass
class CoeffTargets:
    z_sg: Tensor   # basis gradient blocked; feeds the diffusion loss
    z_rec: Tensor  # gradient-carrying; feeds reconstruction
    eps: float


def coeff_targets(B, a, g_mean, eps: float = 1e-3) -> CoeffTargets:
    """Both coefficient targets: (B^T a) / (E[g] + eps), differing only in B's gradient path."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    B, a, g_mean = as_tensor(B), as_tensor(a), as_tensor(g_mean)
    denom = g_mean + eps
    z_sg = project(stop_gradient(B), a) / denom
    z_rec = project(B, a) / denom
    return CoeffTargets(z_sg=z_sg, z_rec=z_rec, eps=eps)


"""Coefficient-space DDPM with one scalar denoiser per expert."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import MLP, Tensor, as_tensor, concat, take


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray       # (steps,)
    alpha_bar: np.ndarray  # (steps,)

    @property
    def steps(self) -> int:
        return len(self.beta)

    def posterior_variance(self) -> np.ndarray:
        """beta_tilde_tau = beta_tau (1 - abar_{tau-1}) / (1 - abar_tau)."""
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        return self.beta * (1.0 - prev) / (1.0 - self.alpha_bar)


def make_schedule(steps: int = 50, beta_start: float = 2e-3, beta_end: float = 0.2) -> DiffusionSchedule:
    if steps < 1:
        raise ValueError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, steps)
    return DiffusionSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))


def _check_tau(tau, sched: DiffusionSchedule) -> np.ndarray:
    tau = np.asarray(tau)
    if np.any(tau < 1) or np.any(tau > sched.steps):
        raise ValueError(f"diffusion step out of range [1, {sched.steps}]")
    return tau


def q_sample(z0, tau, noise, sched: DiffusionSchedule):
    """sqrt(abar) z0 + sqrt(1 - abar) noise; ``tau`` is 1-based, broadcast against z0."""
    tau = _check_tau(tau, sched)
    ab = sched.alpha_bar[tau - 1]
    return np.sqrt(ab) * as_tensor(z0) + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64)


def timestep_embedding(tau: np.ndarray, dim: int = 16) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = np.asarray(tau, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass(frozen=True)
class ExpertDenoiser:
    """K parameter-disjoint MLPs; expert i maps (z_i, emb(tau), s) to predicted noise.

    The chain runs on ``scale * z`` so that coefficient targets are on the
    same footing as the unit-variance forward noise; samples are returned in
    the original units.
    """

    d_s: int
    K: int
    hidden: tuple[int, ...] = (128, 128)
    temb_dim: int = 16
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("coefficient scale must be > 0")

    @property
    def mlp(self) -> MLP:
        return MLP("experts", (1 + self.temb_dim + self.d_s, *self.hidden, 1), stack=self.K)

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        return self.mlp.init(rng)

    def params_per_expert(self) -> int:
        return self.mlp.param_count() // self.K

    def predict(self, params: dict[str, Tensor], z, tau, s, experts=None) -> Tensor:
        """Predicted noise, shape (N, |experts|).

        ``z`` is (N, |experts|); ``tau`` is (N,) or (N, |experts|), 1-based;
        ``experts`` selects a subset of expert indices (default: all).
        """
        z = as_tensor(z)
        s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
        idx = np.arange(self.K) if experts is None else np.asarray(experts)
        n, m = z.shape
        tau = np.asarray(tau)
        if tau.ndim == 1:
            temb = np.broadcast_to(timestep_embedding(tau, self.temb_dim), (m, n, self.temb_dim))
        else:
            temb = timestep_embedding(tau.T, self.temb_dim)
        cond = np.concatenate([temb, np.broadcast_to(s, (m,) + s.shape)], axis=-1)
        x = concat([z.T.reshape((m, n, 1)), Tensor(cond)], axis=-1)
        if experts is None:
            sub = params
        else:
            sub = {k: take(params[k], idx) for k in self.mlp.names()}
        out = self.mlp(sub, x)                                    # (m, n, 1)
        return out.reshape((m, n)).T


def coeff_diffusion_loss(experts: ExpertDenoiser, params: dict, z0_sg, states, sched: DiffusionSchedule,
                         rng: np.random.Generator, per_expert_tau: bool = False) -> Tensor:
    """Mean over steps of ||eps - eps_psi(z_tau, tau, s)||^2 on stop-gradient targets."""
    z0 = as_tensor(z0_sg) * experts.scale
    n, k = z0.shape
    tau = rng.integers(1, sched.steps + 1, size=(n, k) if per_expert_tau else n)
    noise = rng.standard_normal((n, k))
    zt = q_sample(z0, tau if per_expert_tau else tau[:, None], noise, sched)
    pred = experts.predict(params, zt, tau, states)
    err = pred - noise
    return (err * err).sum() * (1.0 / n)


def expert_streams(rng: np.random.Generator, K: int) -> list[np.random.Generator]:
    """One independent generator per expert, derived from a single draw of ``rng``."""
    base = int(rng.integers(0, 2**63 - 1))
    return [np.random.default_rng([base, i]) for i in range(K)]


def chain_noise(streams: list[np.random.Generator], steps: int) -> np.ndarray:
    """(K, steps) standard normals: column 0 seeds z_T, column j the noise added at step T - j."""
    return np.stack([st.standard_normal(steps) for st in streams])


def sample_coefficients(experts: ExpertDenoiser, params: dict, s: np.ndarray, mask: np.ndarray,
                        noise: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Ancestral DDPM over the active coordinates only.

    ``s`` (N, d_s), ``mask`` (N, K) bool, ``noise`` (N, K, steps). Expert i is
    evaluated only on the rows where it is active; inactive entries stay 0.
    """
    n = s.shape[0]
    out = np.zeros((n, experts.K))
    var = sched.posterior_variance()
    mlp = experts.mlp
    for i in range(experts.K):
        rows = np.flatnonzero(mask[:, i])
        if rows.size == 0:
            continue
        si, nz = s[rows], noise[rows, i]
        z = nz[:, 0].copy()
        for j, tau in enumerate(range(sched.steps, 0, -1)):
            temb = np.broadcast_to(timestep_embedding(np.array(tau), experts.temb_dim), (rows.size, experts.temb_dim))
            x = np.concatenate([z[:, None], temb, si], axis=1)
            eps = mlp.apply(params, x, member=i)[:, 0]
            b = sched.beta[tau - 1]
            ab = sched.alpha_bar[tau - 1]
            z = (z - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - b)
            if tau > 1:
                z = z + np.sqrt(var[tau - 1]) * nz[:, j + 1]
        out[rows, i] = z / experts.scale
    return out


def denoise_sample(experts: ExpertDenoiser, params: dict, s, active_set, sched: DiffusionSchedule,
                   rng: np.random.Generator | list[np.random.Generator]) -> np.ndarray:
    """Sample the active coefficients for one state or a batch sharing one active set.

    ``s`` is (d_s,) or (N, d_s). Expert i takes all of its noise from its own
    stream, so an active expert's sample does not depend on which other
    experts are active. Inactive coefficients are exactly 0.
    """
    active = sorted(set(int(i) for i in np.atleast_1d(active_set)))
    if not active:
        raise ValueError("denoise_sample: empty active set")
    if active[0] < 0 or active[-1] >= experts.K:
        raise ValueError("denoise_sample: expert index out of range")
    streams = rng if isinstance(rng, list) else expert_streams(rng, experts.K)
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    s2 = s[None] if single else s
    n = s2.shape[0]
    noise = np.stack([st.standard_normal((n, sched.steps)) for st in streams], axis=1)
    mask = np.zeros((n, experts.K), dtype=bool)
    mask[:, active] = True
    out = sample_coefficients(experts, params, s2, mask, noise, sched)
    return out[0] if single else out

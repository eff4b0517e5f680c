"""Dirichlet gating: amortized posteriors, router, sticky prior and closed-form KLs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import MLP, Tensor, as_tensor, concat, digamma, lgamma, power, softplus, stop_gradient

CONC_FLOOR = 1e-4


@dataclass(frozen=True)
class GateHyper:
    alpha: float = 2.0
    alpha0: float = 0.5
    kappa: float = 20.0
    ablation: bool = False

    def __post_init__(self):
        vals = {"alpha": self.alpha, "alpha0": self.alpha0, "kappa": self.kappa}
        for k, v in vals.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"gate.{k} must be >= 0, got {v}")
        if self.alpha <= 0:
            raise ValueError("gate.alpha must be > 0")
        if not self.ablation and (self.alpha0 <= 0 or self.kappa <= 0):
            raise ValueError("gate.alpha0 and gate.kappa must be > 0 outside ablation mode")


def _check_conc(c: np.ndarray, what: str) -> None:
    if np.any(~(c > 0)):
        raise ValueError(f"{what}: Dirichlet concentrations must be strictly positive")


def dirichlet_mean(conc):
    """E[g] = conc / sum(conc), batched over leading axes."""
    conc = as_tensor(conc)
    _check_conc(conc.data, "dirichlet_mean")
    return conc / conc.sum(axis=-1, keepdims=True)


def dirichlet_kl(q, p) -> Tensor:
    """KL(Dir(q) || Dir(p)) in closed form; batched over leading axes."""
    q, p = as_tensor(q), as_tensor(p)
    _check_conc(q.data, "dirichlet_kl q")
    _check_conc(p.data, "dirichlet_kl p")
    q0 = q.sum(axis=-1)
    p0 = p.sum(axis=-1)
    dig = digamma(q) - digamma(q0).reshape(q0.shape + (1,))
    return (lgamma(q0) - lgamma(p0)
            - (lgamma(q) - lgamma(p)).sum(axis=-1)
            + ((q - p) * dig).sum(axis=-1))


def sticky_concentration(g_prev, theta_mean, hyper: GateHyper):
    """Prior concentration kappa * g_prev + alpha0 * theta; g_prev=None for t=1."""
    theta_mean = as_tensor(theta_mean)
    conc = hyper.alpha0 * theta_mean
    if g_prev is not None:
        conc = hyper.kappa * as_tensor(g_prev) + conc
    if np.any(np.all(conc.data <= 0, axis=-1)):
        raise ValueError("sticky_concentration: all-zero concentration (kappa = alpha0 = 0)")
    return conc


def kappa_schedule(step: int, total_steps: int, kappa: float, frac: float = 0.2) -> float:
    """Linear ramp kappa/10 -> kappa over the first ``frac`` of training."""
    ramp = frac * total_steps
    if ramp <= 0 or step >= ramp:
        return kappa
    return kappa * (0.1 + 0.9 * step / ramp)


@dataclass(frozen=True)
class GateAmortizer:
    """Posterior q(g|s,a), usage q(theta) and state-only router nets."""

    d_s: int
    d: int
    K: int
    hidden: tuple[int, ...] = (64, 64)

    @property
    def posterior(self) -> MLP:
        return MLP("posterior", (self.d_s + self.d, *self.hidden, self.K))

    @property
    def usage(self) -> MLP:
        return MLP("usage", (self.d_s + self.d, *self.hidden, self.K))

    @property
    def router(self) -> MLP:
        return MLP("router", (self.d_s, *self.hidden, self.K))

    def init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        params = {}
        for net in (self.posterior, self.usage, self.router):
            params.update(net.init(rng, out_scale=0.1))
        return params

    @staticmethod
    def _conc(x: Tensor) -> Tensor:
        return softplus(x) + CONC_FLOOR

    def posterior_conc(self, params, s, a) -> Tensor:
        return self._conc(self.posterior(params, concat([as_tensor(s), as_tensor(a)], axis=-1)))

    def usage_conc(self, params, pooled) -> Tensor:
        return self._conc(self.usage(params, as_tensor(pooled)))

    def router_conc(self, params, s) -> Tensor:
        return self._conc(self.router(params, as_tensor(s)))


def amortizer_forward(net: GateAmortizer, params: dict, branch: str, *inputs) -> Tensor:
    """Dispatch to one amortizer branch: 'posterior' (s, a), 'usage' (pooled), 'router' (s)."""
    if branch == "posterior":
        return net.posterior_conc(params, *inputs)
    if branch == "usage":
        return net.usage_conc(params, *inputs)
    if branch == "router":
        return net.router_conc(params, *inputs)
    raise ValueError(f"unknown amortizer branch {branch!r}")


def _prior_floor(hyper: GateHyper) -> float:
    return CONC_FLOOR if hyper.alpha0 == 0 else 0.0


def gate_loss(posteriors, usage, hyper: GateHyper, kappa: float | None = None) -> Tensor:
    """Gate regularizer for one trajectory.

    KL(q(theta) || Dir(alpha 1)) + KL(q(g_1) || Dir(alpha0 E[theta]))
    + sum_{t>=2} KL(q(g_t) || Dir(kappa E[g_{t-1}] + alpha0 E[theta])).
    With alpha0 = 0 (ablation only) prior concentrations get a CONC_FLOOR
    offset so the t = 1 term stays defined.
    """
    posteriors, usage = as_tensor(posteriors), as_tensor(usage)
    if posteriors.ndim != 2 or posteriors.shape[0] < 1:
        raise ValueError("gate_loss: posteriors must be (T >= 1, K)")
    K = posteriors.shape[-1]
    kappa = hyper.kappa if kappa is None else kappa
    theta = dirichlet_mean(usage)
    loss = dirichlet_kl(usage, np.full(K, hyper.alpha))
    floor = _prior_floor(hyper)
    prior = (hyper.alpha0 * theta).reshape((1, K)) + floor
    loss = loss + dirichlet_kl(posteriors[0:1], prior).sum()
    if posteriors.shape[0] > 1:
        means = dirichlet_mean(posteriors)
        sticky = kappa * means[:-1] + prior
        loss = loss + dirichlet_kl(posteriors[1:], sticky).sum()
    return loss


def gate_loss_batched(post_conc: Tensor, usage_conc: Tensor, traj: np.ndarray, first: np.ndarray,
                      hyper: GateHyper, kappa: float | None = None) -> Tensor:
    """Sum of :func:`gate_loss` over trajectories laid out row-wise.

    ``post_conc`` is (N, K) for all steps of all trajectories, ``traj[n]``
    the trajectory index of row n, ``first[n]`` whether row n is t = 1.
    Rows of one trajectory must be contiguous and in time order.
    """
    K = post_conc.shape[-1]
    kappa = hyper.kappa if kappa is None else kappa
    theta = dirichlet_mean(usage_conc)                           # (B, K)
    loss = dirichlet_kl(usage_conc, np.full(K, hyper.alpha)).sum()
    anchor = (hyper.alpha0 * theta)[traj]                        # (N, K)
    means = dirichlet_mean(post_conc)
    prev = np.maximum(np.arange(len(traj)) - 1, 0)
    keep = (~first).astype(np.float64)[:, None]
    prior = (kappa * keep) * means[prev] + anchor + _prior_floor(hyper)
    return loss + dirichlet_kl(post_conc, prior).sum()


def router_align_loss(posteriors, router_outs, stop_posterior: bool = False,
                      sharpen: float = 1.0) -> Tensor:
    """sum_t KL(q(g_t | s_t, a_t) || Dir(router(s_t))).

    ``sharpen`` raises posterior concentrations to a power before alignment
    (1.0 = off); ``stop_posterior`` turns the term into pure distillation.
    """
    posteriors, router_outs = as_tensor(posteriors), as_tensor(router_outs)
    if posteriors.shape != router_outs.shape:
        raise ValueError(f"router_align_loss: length mismatch {posteriors.shape} vs {router_outs.shape}")
    q = stop_gradient(posteriors) if stop_posterior else posteriors
    if sharpen != 1.0:
        q = power(q, sharpen)
    return dirichlet_kl(q, router_outs).sum()

"""State-only routing, adaptive expert activation, sparse denoising and rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cmp_to_key

import numpy as np

from . import synthenv
from .diffusion import chain_noise, expert_streams, sample_coefficients
from .gates import dirichlet_mean
from .skillbasis import basis_forward
from .trainer import SkillPolicy

MODES = ("both", "topk", "coverage")
MASSES = ("squared", "linear")


@dataclass(frozen=True)
class ActivationBudget:
    """Stop adding experts at ``k`` experts and/or at ``tau_m`` covered mass.

    tau_m = 0 is accepted so the top-1 fallback can be exercised.
    """

    k: int = 4
    tau_m: float = 0.95
    mode: str = "both"
    mass: str = "squared"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("activation.k must be >= 1")
        if not 0.0 <= self.tau_m <= 1.0:
            raise ValueError("activation.tau_m must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"activation.mode must be one of {MODES}")
        if self.mass not in MASSES:
            raise ValueError(f"activation.mass must be one of {MASSES}")


@dataclass(frozen=True)
class ActiveSet:
    indices: tuple[int, ...]   # descending mass, ties by lower index
    covered: float             # fraction of total mass captured
    masses: np.ndarray
    comparisons: int = 0       # comparisons spent ordering the experts

    def __len__(self) -> int:
        return len(self.indices)

    def mask(self, K: int) -> np.ndarray:
        m = np.zeros(K, dtype=bool)
        m[list(self.indices)] = True
        return m


def expert_masses(g_bar: np.ndarray, mass: str = "squared") -> np.ndarray:
    g = np.asarray(g_bar, dtype=np.float64)
    return g * g if mass == "squared" else g.copy()


def select_active(g_bar, budget: ActivationBudget = ActivationBudget()) -> ActiveSet:
    """Greedy selection in descending mass until the budget stops it.

    Because the covered mass is a sum of per-expert masses, the greedy prefix
    is the smallest set reaching the threshold, and among sets of that size
    it captures the most mass.
    """
    g = np.asarray(g_bar, dtype=np.float64)
    if g.ndim != 1 or np.any(g < 0) or abs(g.sum() - 1.0) > 1e-6:
        raise ValueError("select_active: g_bar must be a point on the simplex")
    K = len(g)
    if budget.k > K:
        raise ValueError(f"activation.k={budget.k} exceeds K={K}")
    m = expert_masses(g, budget.mass)
    count = 0

    def cmp(i, j):
        nonlocal count
        count += 1
        if m[i] != m[j]:
            return -1 if m[i] > m[j] else 1
        return -1 if i < j else 1

    order = sorted(range(K), key=cmp_to_key(cmp))
    total = m.sum()
    use_k = budget.mode in ("both", "topk")
    use_tau = budget.mode in ("both", "coverage")
    chosen, cov = [], 0.0
    for i in order:
        if use_k and len(chosen) >= budget.k:
            break
        if use_tau and cov / total >= budget.tau_m:
            break
        chosen.append(i)
        cov += m[i]
    if not chosen:
        chosen = [order[0]]
    covered = float(m[chosen].sum() / total)
    return ActiveSet(tuple(chosen), covered, m, count)


# -- policy evaluation (no tape) --------------------------------------------------
def router_mean(policy: SkillPolicy, s) -> np.ndarray:
    conc = policy.amortizer.router_conc(policy.params, np.asarray(s, dtype=np.float64))
    return dirichlet_mean(conc).data


def posterior_mean(policy: SkillPolicy, s, a_chunk) -> np.ndarray:
    conc = policy.amortizer.posterior_conc(policy.params, np.asarray(s, dtype=np.float64),
                                           np.asarray(a_chunk, dtype=np.float64))
    return dirichlet_mean(conc).data


def basis(policy: SkillPolicy, s) -> np.ndarray:
    return basis_forward(policy.basis_net, policy.params, np.asarray(s, dtype=np.float64)).B.data


@dataclass
class ActResult:
    chunks: np.ndarray           # (N, H, d_env)
    gates: np.ndarray            # (N, K) router means
    active: list[ActiveSet]
    coeffs: np.ndarray           # (N, K), zero outside the active sets


def act_batch(policy: SkillPolicy, states: np.ndarray, budget: ActivationBudget,
              rngs: list[np.random.Generator]) -> ActResult:
    """One routing/activation/denoising/decoding pass for N states, one rng each.

    Row n depends only on states[n] and rngs[n].
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]
    if states.shape[1] != policy.dims.d_s:
        raise ValueError(f"state dim {states.shape[1]} does not match policy d_s={policy.dims.d_s}")
    if len(rngs) != n:
        raise ValueError("act_batch: need one rng per state")
    K, sched = policy.dims.K, policy.schedule
    g = router_mean(policy, states)
    active = [select_active(row, budget) for row in g]
    mask = np.stack([a.mask(K) for a in active])
    noise = np.stack([chain_noise(expert_streams(r, K), sched.steps) for r in rngs])
    z = sample_coefficients(policy.experts, policy.params, states, mask, noise, sched)
    B = basis(policy, states)
    a = np.einsum("ndk,nk->nd", B, g * z)
    return ActResult(a.reshape(n, policy.dims.horizon, policy.dims.d_env), g, active, z)


def act(policy: SkillPolicy, s, budget: ActivationBudget = ActivationBudget(),
        rng: np.random.Generator | None = None) -> tuple[np.ndarray, ActiveSet, np.ndarray]:
    """Action chunk (H, d_env) for one state, with its active set and router mean."""
    rng = np.random.default_rng(0) if rng is None else rng
    res = act_batch(policy, np.asarray(s)[None], budget, [rng])
    return res.chunks[0], res.active[0], res.gates[0]


# -- rollouts ------------------------------------------------------------------------
@dataclass
class Episode:
    task_id: int
    states: list[np.ndarray]
    actions: list[np.ndarray] = field(default_factory=list)
    phases: list[int] = field(default_factory=list)
    gates: list[np.ndarray] = field(default_factory=list)       # router mean at every visited state
    active: list[tuple[int, ...]] = field(default_factory=list)  # active set driving each executed step
    milestones: int = 0
    done: bool = False
    aborted: bool = False

    def trajectory(self) -> synthenv.Trajectory:
        d = self.states[0].shape[0]
        return synthenv.Trajectory(self.task_id, np.array(self.states).reshape(-1, d),
                                   np.array(self.actions).reshape(-1, synthenv.ACTION_DIM),
                                   np.array(self.phases, dtype=np.int64), self.success)

    @property
    def success(self) -> bool:
        return self.done and not self.aborted

    def progress(self, spec: synthenv.TaskSpec) -> float:
        return self.milestones / len(spec.phases)


def _advance_milestones(ep: Episode, spec: synthenv.TaskSpec) -> None:
    s = ep.states[-1]
    while ep.milestones < len(spec.phases) and synthenv.phase_done(
            s, spec.phases[ep.milestones], tol=synthenv.MILESTONE_TOL, strict=False):
        ep.milestones += 1
    if ep.milestones == len(spec.phases):
        ep.done = True


def rollout_many(policy: SkillPolicy, specs: list[synthenv.TaskSpec], starts: list[np.ndarray],
                 budget: ActivationBudget, rngs: list[np.random.Generator],
                 max_steps: int = 200, execute: int | None = None) -> list[Episode]:
    """Closed-loop episodes run in lockstep; the first ``execute`` steps of each chunk run open-loop, then re-plan.

    ``execute`` defaults to the chunk length H. Each episode stops when its
    milestones are all reached or at ``max_steps``. A non-finite state aborts
    that episode as a failure.
    """
    eps = [Episode(sp.task_id, [np.asarray(s0, dtype=np.float64).copy()]) for sp, s0 in zip(specs, starts)]
    for ep, sp in zip(eps, specs):
        _advance_milestones(ep, sp)
    H = policy.dims.horizon if execute is None else execute
    if not 1 <= H <= policy.dims.horizon:
        raise ValueError(f"execute must lie in [1, {policy.dims.horizon}], got {execute}")
    t = 0
    while t < max_steps:
        live = [i for i, ep in enumerate(eps) if not ep.done and not ep.aborted]
        if not live:
            break
        res = act_batch(policy, np.stack([eps[i].states[-1] for i in live]), budget, [rngs[i] for i in live])
        for h in range(min(H, max_steps - t)):
            running = [j for j, i in enumerate(live) if not eps[i].done and not eps[i].aborted]
            if not running:
                break
            if h == 0:
                gates = res.gates
            else:
                gates = np.zeros_like(res.gates)
                gates[running] = router_mean(policy, np.stack([eps[live[j]].states[-1] for j in running]))
            for j in running:
                i = live[j]
                ep, sp = eps[i], specs[i]
                s = ep.states[-1]
                ep.gates.append(gates[j])
                ep.phases.append(synthenv.current_phase(s, sp))
                ep.active.append(res.active[j].indices)
                a = res.chunks[j, h]
                nxt = synthenv.env_step(s, a)
                ep.actions.append(a)
                ep.states.append(nxt)
                if not np.all(np.isfinite(nxt)):
                    ep.aborted = True
                    continue
                _advance_milestones(ep, sp)
        t += H
    return eps


def rollout(policy: SkillPolicy, spec: synthenv.TaskSpec, s0: np.ndarray,
            budget: ActivationBudget = ActivationBudget(), max_steps: int = 200,
            rng: np.random.Generator | None = None, execute: int | None = None) -> Episode:
    rng = np.random.default_rng(0) if rng is None else rng
    return rollout_many(policy, [spec], [s0], budget, [rng], max_steps, execute)[0]


def evaluate(policy: SkillPolicy, specs: list[synthenv.TaskSpec], episodes: int, seed: int,
             budget: ActivationBudget = ActivationBudget(), max_steps: int = 200,
             n_tasks: int = 8, execute: int | None = None) -> list[Episode]:
    """``episodes`` seeded episodes per task; layouts are disjoint from demo seeds."""
    run_specs, starts, rngs = [], [], []
    for sp in specs:
        for e in range(episodes):
            layout = np.random.default_rng([seed, sp.task_id, e, 7919])
            run_specs.append(sp)
            starts.append(synthenv.reset(sp, layout, n_tasks))
            rngs.append(np.random.default_rng([seed, sp.task_id, e, 104729]))
    return rollout_many(policy, run_specs, starts, budget, rngs, max_steps, execute)

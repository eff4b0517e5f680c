"""Training: total loss, optimization loop, transfer modes and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthenv
from .diffusion import DiffusionSchedule, ExpertDenoiser, coeff_diffusion_loss, make_schedule
from .gates import (GateAmortizer, GateHyper, dirichlet_mean, gate_loss_batched, kappa_schedule,
                    router_align_loss)
from .numcore import OptimizerState, Tape, Tensor, adamw_step, backward
from .skillbasis import BasisNet, basis_forward, coeff_targets, decode_action

log = logging.getLogger(__name__)

COMPONENTS = ("basis", "posterior", "usage", "router", "experts")
LOSS_NAMES = ("coeff", "recon", "gate", "align")


@dataclass
class TrainConfig:
    sigma_a: float = 0.1
    eps: float = 1e-3
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    w_coeff: float = 1.0
    w_recon: float = 1.0
    w_gate: float = 1.0
    w_align: float = 1.0
    freeze: tuple[str, ...] = ()
    kappa_anneal_frac: float = 0.2
    per_expert_tau: bool = False
    align_stop_posterior: bool = False
    align_sharpen: float = 1.0
    align_warmup: int = 0
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.sigma_a <= 0:
            raise ValueError("train.sigma_a must be > 0")
        if self.eps <= 0:
            raise ValueError("train.eps must be > 0")
        if self.lr <= 0:
            raise ValueError("train.lr must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("train.batch_size must be >= 1 and train.steps >= 0")
        if min(self.weights.values()) < 0:
            raise ValueError("loss weights must be >= 0")
        unknown = set(self.freeze) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown components in freeze mask: {sorted(unknown)}")
        if set(self.freeze) >= set(COMPONENTS):
            raise ValueError("freeze mask cannot freeze every component")

    @property
    def weights(self) -> dict[str, float]:
        return {"coeff": self.w_coeff, "recon": self.w_recon, "gate": self.w_gate, "align": self.w_align}


@dataclass(frozen=True)
class Dims:
    d_s: int
    d_env: int = synthenv.ACTION_DIM
    horizon: int = 8
    K: int = 8
    basis_hidden: tuple[int, ...] = (128, 128)
    gate_hidden: tuple[int, ...] = (64, 64)
    expert_hidden: tuple[int, ...] = (128, 128)
    coeff_scale: float = 5.0

    @property
    def d(self) -> int:
        """Length of the decoded vector: one flattened action chunk."""
        return self.d_env * self.horizon

    def __post_init__(self):
        if not 1 <= self.K <= self.d:
            raise ValueError(f"need 1 <= K <= d = horizon * d_env, got K={self.K}, d={self.d}")
        if not self.coeff_scale > 0:
            raise ValueError("diffusion.coeff_scale must be > 0")


@dataclass
class SkillPolicy:
    dims: Dims
    hyper: GateHyper
    config: TrainConfig
    schedule_params: tuple[int, float, float] = (50, 2e-3, 0.2)
    params: dict[str, Tensor] = field(default_factory=dict)
    opt: OptimizerState = field(default_factory=OptimizerState)
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def basis_net(self) -> BasisNet:
        return BasisNet(self.dims.d_s, self.dims.d, self.dims.K, self.dims.basis_hidden)

    @property
    def amortizer(self) -> GateAmortizer:
        return GateAmortizer(self.dims.d_s, self.dims.d, self.dims.K, self.dims.gate_hidden)

    @property
    def experts(self) -> ExpertDenoiser:
        return ExpertDenoiser(self.dims.d_s, self.dims.K, self.dims.expert_hidden, scale=self.dims.coeff_scale)

    @property
    def schedule(self) -> DiffusionSchedule:
        return make_schedule(*self.schedule_params)

    def component_params(self, component: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.split(".")[0] == component}

    def param_count(self, component: str | None = None) -> int:
        items = self.params.items() if component is None else self.component_params(component).items()
        return int(sum(v.data.size for _, v in items))

    def clone(self) -> "SkillPolicy":
        return copy.deepcopy(self)


def init_policy(dims: Dims, hyper: GateHyper | None = None, config: TrainConfig | None = None,
                schedule_params=(50, 2e-3, 0.2)) -> SkillPolicy:
    config = config or TrainConfig()
    hyper = hyper or GateHyper()
    make_schedule(*schedule_params)
    pol = SkillPolicy(dims, hyper, config, tuple(schedule_params))
    rng = np.random.default_rng([config.seed, 1])
    pol.params.update(pol.basis_net.init(rng))
    pol.params.update(pol.amortizer.init(rng))
    pol.params.update(pol.experts.init(rng))
    pol.opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    pol.rng = np.random.default_rng([config.seed, 2])
    return pol


# -- data preparation ---------------------------------------------------------
@dataclass
class Prepared:
    """One trajectory as training rows: state s_t and the action chunk starting at t."""

    task_id: int
    states: np.ndarray   # (T, d_s)
    chunks: np.ndarray   # (T, H * d_env)
    phases: np.ndarray   # (T,)


def action_chunks(actions: np.ndarray, horizon: int) -> np.ndarray:
    """Row t holds actions t .. t+H-1 flattened; steps past the end are zero (hold still)."""
    T, d = actions.shape
    padded = np.concatenate([actions, np.zeros((horizon, d))])
    idx = np.arange(T)[:, None] + np.arange(horizon)[None, :]
    return padded[idx].reshape(T, horizon * d)


def prepare(trajs, horizon: int) -> list[Prepared]:
    out = []
    for tr in trajs:
        if len(tr) < 1:
            continue
        out.append(Prepared(tr.task_id, tr.states[:-1].copy(), action_chunks(tr.actions, horizon), tr.phases))
    return out


@dataclass
class Batch:
    S: np.ndarray
    A: np.ndarray
    pooled: np.ndarray
    traj: np.ndarray
    first: np.ndarray

    @property
    def rows(self) -> int:
        return len(self.S)


def make_batch(items: list[Prepared]) -> Batch:
    S = np.concatenate([p.states for p in items])
    A = np.concatenate([p.chunks for p in items])
    lens = [len(p.states) for p in items]
    traj = np.repeat(np.arange(len(items)), lens)
    first = np.zeros(len(S), dtype=bool)
    first[np.concatenate([[0], np.cumsum(lens)[:-1]])] = True
    pooled = np.stack([np.concatenate([p.states, p.chunks], axis=1).mean(axis=0) for p in items])
    return Batch(S, A, pooled, traj, first)


# -- loss -------------------------------------------------------------------------
def loss_terms(policy: SkillPolicy, batch: Batch, rng: np.random.Generator,
               kappa: float | None = None) -> dict[str, Tensor]:
    """Per-step-normalized loss components for a batch (call inside a Tape to differentiate).

    Every component is the trajectory-level sum divided by the number of
    rows in the batch, so relative weights match the unnormalized objective.
    """
    cfg, p = policy.config, policy.params
    n = batch.rows
    sb = basis_forward(policy.basis_net, p, batch.S)
    post = policy.amortizer.posterior_conc(p, batch.S, batch.A)
    g_mean = dirichlet_mean(post)
    tg = coeff_targets(sb.B, batch.A, g_mean, cfg.eps)

    l_coeff = coeff_diffusion_loss(policy.experts, p, tg.z_sg, batch.S, policy.schedule, rng,
                                   per_expert_tau=cfg.per_expert_tau)
    resid = batch.A - decode_action(sb.B, g_mean, tg.z_rec)
    l_recon = (resid * resid).sum() * (1.0 / (2.0 * cfg.sigma_a ** 2) / n)
    usage = policy.amortizer.usage_conc(p, batch.pooled)
    l_gate = gate_loss_batched(post, usage, batch.traj, batch.first, policy.hyper, kappa) * (1.0 / n)
    router = policy.amortizer.router_conc(p, batch.S)
    l_align = router_align_loss(post, router, cfg.align_stop_posterior, cfg.align_sharpen) * (1.0 / n)
    return {"coeff": l_coeff, "recon": l_recon, "gate": l_gate, "align": l_align}


def total_loss(policy: SkillPolicy, terms: dict[str, Tensor], step: int | None = None) -> Tensor:
    w = dict(policy.config.weights)
    if step is not None and step < policy.config.align_warmup:
        w["align"] = 0.0
    total = None
    for k in LOSS_NAMES:
        if w[k] == 0.0:
            continue
        term = terms[k] * w[k]
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def _set_trainable(policy: SkillPolicy) -> list[str]:
    frozen = set(policy.config.freeze)
    names = []
    for k, v in policy.params.items():
        v.requires_grad = k.split(".")[0] not in frozen
        if v.requires_grad:
            names.append(k)
    return names


def train_step(policy: SkillPolicy, batch: Batch | list[Prepared], rng: np.random.Generator | None = None,
               total_steps: int | None = None) -> dict[str, float]:
    """One optimizer step on the full objective; returns the loss report.

    A non-finite loss or gradient skips the update and leaves the step
    counter unchanged (report has ``skipped`` = 1).
    """
    if not isinstance(batch, Batch):
        batch = make_batch(batch)
    if batch.S.shape[1] != policy.dims.d_s or batch.A.shape[1] != policy.dims.d:
        raise ValueError("batch dimensions do not match the policy")
    rng = policy.rng if rng is None else rng
    cfg = policy.config
    total_steps = cfg.steps if total_steps is None else total_steps
    kappa = kappa_schedule(policy.step, total_steps, policy.hyper.kappa, cfg.kappa_anneal_frac)
    trainable = _set_trainable(policy)
    with Tape() as tape:
        terms = loss_terms(policy, batch, rng, kappa)
        total = total_loss(policy, terms, policy.step)
    report = {k: float(terms[k].data) for k in LOSS_NAMES}
    report["total"] = float(total.data)
    report["kappa"] = kappa
    report["skipped"] = 0
    if not all(np.isfinite(v) for v in report.values()):
        log.warning("step %d: non-finite loss %s; skipped", policy.step, report)
        report["skipped"] = 1
        return report
    if all(v == 0.0 for v in cfg.weights.values()):
        return report
    grads = backward(tape, total)
    gmap = {}
    for name in trainable:
        t = policy.params[name]
        gmap[name] = grads.get(t, np.zeros_like(t.data))
    policy.opt.lr = cfg.lr
    policy.opt.weight_decay = cfg.weight_decay
    if not adamw_step(policy.params, gmap, policy.opt):
        report["skipped"] = 1
        return report
    policy.step += 1
    return report


def check_dataset(policy: SkillPolicy, trajs) -> None:
    if not trajs:
        raise ValueError("dataset is empty")
    for tr in trajs:
        if tr.states.shape[1] != policy.dims.d_s or tr.actions.shape[1] != policy.dims.d_env:
            raise ValueError(f"trajectory dims {tr.states.shape[1]}/{tr.actions.shape[1]} do not match "
                             f"policy dims {policy.dims.d_s}/{policy.dims.d_env}")


def train_loop(policy: SkillPolicy, trajs, steps: int | None = None, out_dir: str | Path | None = None,
               run_id: str = "train") -> tuple[SkillPolicy, list[dict]]:
    """Run ``steps`` train_steps (default config.steps) with seeded shuffled batching.

    Mutates and returns ``policy`` along with the logged metric rows. With
    ``out_dir`` set, checkpoints land in ``out_dir/ckpt_<step>`` every
    ``ckpt_every`` steps plus ``out_dir/final``.
    """
    check_dataset(policy, trajs)
    cfg = policy.config
    steps = cfg.steps if steps is None else steps
    data = prepare(trajs, policy.dims.horizon)
    order: list[int] = []
    rows: list[dict] = []
    start = policy.step
    done = 0
    while done < steps:
        if len(order) < cfg.batch_size:
            order.extend(policy.rng.permutation(len(data)).tolist())
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        report = train_step(policy, make_batch([data[i] for i in idx]), total_steps=start + steps)
        done += 1
        if done % cfg.log_every == 0 or done == 1 or done == steps:
            row = {"run": run_id, "step": start + done, **{k: report[k] for k in (*LOSS_NAMES, "total")}}
            rows.append(row)
            log.info("%s step %d total %.5f recon %.5f coeff %.5f gate %.5f align %.5f", run_id, row["step"],
                     row["total"], row["recon"], row["coeff"], row["gate"], row["align"])
        if out_dir is not None and cfg.ckpt_every and done % cfg.ckpt_every == 0:
            save_checkpoint(policy, Path(out_dir) / f"ckpt_{policy.step}")
    if out_dir is not None:
        save_checkpoint(policy, Path(out_dir) / "final")
    return policy, rows


def finetune(init: SkillPolicy, trajs, config: TrainConfig, out_dir=None,
             run_id: str = "finetune") -> tuple[SkillPolicy, list[dict]]:
    """Full few-shot fine-tuning from a trained policy with a fresh optimizer."""
    pol = init.clone()
    pol.config = config
    pol.opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    pol.rng = np.random.default_rng([config.seed, 3])
    pol.step = 0
    return train_loop(pol, trajs, config.steps, out_dir, run_id)


def finetune_router(init: SkillPolicy, trajs, config: TrainConfig, train_posterior: bool = False,
                    out_dir=None, run_id: str = "finetune-router") -> tuple[SkillPolicy, list[dict]]:
    """Skill composition: only the router (optionally the posterior) is updated."""
    frozen = ["basis", "usage", "experts"] + ([] if train_posterior else ["posterior"])
    cfg = TrainConfig(**{**asdict(config), "freeze": tuple(frozen)})
    return finetune(init, trajs, cfg, out_dir, run_id)


# -- checkpoints ----------------------------------------------------------------
CHECKPOINT_VERSION = 1


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_checkpoint(policy: SkillPolicy, path: str | Path) -> None:
    """Directory with ``manifest.json`` (sorted keys) and ``blob.bin`` (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for k, v in policy.params.items():
        arrays[f"param/{k}"] = v.data
    for k in policy.opt.m:
        arrays[f"adam_m/{k}"] = policy.opt.m[k]
        arrays[f"adam_v/{k}"] = policy.opt.v[k]
    entries, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries[name] = {"shape": list(a.shape), "offset": offset, "length": int(a.size)}
        chunks.append(a.reshape(-1))
        offset += a.size
    opt = {k: getattr(policy.opt, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
    cfg = asdict(policy.config)
    cfg["freeze"] = list(cfg["freeze"])
    manifest = {
        "version": CHECKPOINT_VERSION,
        "dims": {**asdict(policy.dims)},
        "hyper": asdict(policy.hyper),
        "config": cfg,
        "schedule": list(policy.schedule_params),
        "optimizer": opt,
        "step": policy.step,
        "rng": _rng_state(policy.rng),
        "total_values": offset,
        "arrays": entries,
    }
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (path / "blob.bin").write_bytes(blob.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> SkillPolicy:
    path = Path(path)
    mpath, bpath = path / "manifest.json", path / "blob.bin"
    if not mpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint manifest: {e}") from None
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {manifest.get('version')} does not match "
                         f"supported version {CHECKPOINT_VERSION}")
    raw = bpath.read_bytes()
    if len(raw) != 8 * manifest["total_values"]:
        raise ValueError(f"checkpoint blob holds {len(raw)} bytes, manifest expects "
                         f"{8 * manifest['total_values']}")
    blob = np.frombuffer(raw, dtype="<f8")

    dm = manifest["dims"]
    dims = Dims(**{k: tuple(v) if isinstance(v, list) else v for k, v in dm.items()})
    cfg = TrainConfig(**{**manifest["config"], "freeze": tuple(manifest["config"]["freeze"])})
    pol = SkillPolicy(dims, GateHyper(**manifest["hyper"]), cfg, tuple(manifest["schedule"]))
    opt = OptimizerState(**manifest["optimizer"])
    for name, e in manifest["arrays"].items():
        if e["offset"] + e["length"] > blob.size or int(np.prod(e["shape"])) != e["length"]:
            raise ValueError(f"checkpoint entry {name} is inconsistent with the blob")
        a = blob[e["offset"]:e["offset"] + e["length"]].reshape(e["shape"]).astype(np.float64)
        kind, key = name.split("/", 1)
        if kind == "param":
            pol.params[key] = Tensor(a, requires_grad=True, name=key)
        elif kind == "adam_m":
            opt.m[key] = a
        else:
            opt.v[key] = a
    pol.params = dict(sorted(pol.params.items(), key=lambda kv: kv[0]))
    pol.opt = opt
    pol.step = manifest["step"]
    pol.rng = _rng_from_state(manifest["rng"])
    return pol

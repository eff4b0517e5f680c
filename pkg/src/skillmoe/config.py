"""Flat dotted-key experiment configuration with validation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from . import synthenv
from .diffusion import make_schedule
from .gates import GateHyper
from .inference import ActivationBudget
from .trainer import Dims, TrainConfig


class ConfigError(ValueError):
    """Bad key, type or value; message names the key."""


# key -> (default, description). The type of the default fixes the key's type;
# tuples are written comma-separated.
SCHEMA: dict[str, tuple[object, str]] = {
    "run.id": ("run", "label written into every metrics row"),
    "run.out_dir": ("runs/default", "output directory for this command"),
    "run.checkpoint": ("", "checkpoint directory read by eval/infer/finetune/ablate-activation/metrics"),
    "run.log_level": ("INFO", "logging level"),

    "data.path": ("", "dataset directory; empty = generate demos in memory"),
    "data.train_tasks": ((0, 1, 2, 3, 4, 5), "task ids used for multi-task training"),
    "data.demos_per_task": (64, "scripted demonstrations per task"),
    "data.seed": (0, "layout seed for demonstrations"),

    "model.K": (8, "number of experts / skill directions"),
    "model.horizon": (8, "action chunk length H; decoded vectors have H * 6 entries"),
    "model.basis_hidden": ((128, 128), "hidden widths of the basis network"),
    "model.gate_hidden": ((64, 64), "hidden widths of posterior, usage and router networks"),
    "model.expert_hidden": ((128, 128), "hidden widths of each expert denoiser"),

    "diffusion.steps": (50, "denoising steps"),
    "diffusion.beta_start": (2e-3, "first noise variance"),
    "diffusion.beta_end": (0.2, "last noise variance"),
    "diffusion.coeff_scale": (5.0, "experts denoise coeff_scale * z (unit-scale targets for the unit-variance chain)"),

    "gate.alpha": (2.0, "usage prior concentration"),
    "gate.alpha0": (0.5, "usage anchor weight in the gate prior (0 = ablation)"),
    "gate.kappa": (20.0, "stickiness (0 = ablation)"),

    "train.sigma_a": (0.1, "reconstruction noise std"),
    "train.eps": (1e-3, "denominator guard of the coefficient targets"),
    "train.lr": (3e-3, "AdamW learning rate (desk scale; 1e-5 is the full-scale value)"),
    "train.weight_decay": (1e-4, "decoupled weight decay"),
    "train.batch_size": (16, "trajectories per step (128 at full scale)"),
    "train.steps": (2000, "optimizer steps"),
    "train.seed": (0, "initialization and batching seed"),
    "train.w_coeff": (1.0, "weight of the coefficient diffusion loss"),
    "train.w_recon": (1.0, "weight of the reconstruction loss"),
    "train.w_gate": (1.0, "weight of the gate regularizer"),
    "train.w_align": (1.0, "weight of the router alignment loss"),
    "train.freeze": ((), "components held fixed: basis, posterior, usage, router, experts"),
    "train.kappa_anneal_frac": (0.2, "fraction of training over which kappa ramps from kappa/10"),
    "train.per_expert_tau": (False, "draw one diffusion step per (row, expert) instead of per row"),
    "train.align_stop_posterior": (False, "block alignment gradients into the posterior"),
    "train.align_sharpen": (1.0, "power applied to posterior concentrations in alignment"),
    "train.align_warmup": (0, "steps before the alignment loss is switched on"),
    "train.log_every": (50, "training metric cadence (steps)"),
    "train.ckpt_every": (1000, "checkpoint cadence (steps)"),

    "activation.k": (4, "maximum number of active experts"),
    "activation.tau_m": (0.95, "mass coverage threshold"),
    "activation.mode": ("both", "stopping rule: both, topk or coverage"),
    "activation.mass": ("squared", "expert mass: squared or linear router mean"),

    "eval.tasks": ((0, 1, 2, 3, 4, 5), "task ids evaluated"),
    "eval.episodes": (100, "episodes per task and seed"),
    "eval.seeds": ((0, 1, 2), "evaluation seeds"),
    "eval.max_steps": (200, "episode step cap"),
    "eval.probe_demos": (8, "held-out demos per task used for gate and subspace diagnostics"),

    "finetune.task": (6, "task id of the transfer target"),
    "finetune.demos": (10, "demonstrations of the transfer target"),
    "finetune.data_seed": (1, "layout seed of the transfer demos"),
    "finetune.train_posterior": (False, "router-only mode also updates the posterior"),

    "infer.task": (0, "task id for the single rollout"),
    "infer.seed": (0, "seed for the single rollout"),

    "ablate.kappa": ((0.0, 5.0, 20.0, 50.0, 100.0), "kappa grid"),
    "ablate.alpha": ((0.1, 0.5, 2.0, 5.0, 10.0), "alpha grid"),
    "ablate.alpha0": ((0.0, 0.1, 0.5, 1.0, 2.0), "alpha0 grid"),
    "ablate.k": ((1, 2, 3, 4, 5), "k grid (top-k mode)"),
    "ablate.tau_m": ((0.9, 0.925, 0.95, 0.975), "tau_m grid (coverage with k = K)"),
}

TUPLE_ITEM = {"data.train_tasks": int, "model.basis_hidden": int, "model.gate_hidden": int,
              "model.expert_hidden": int, "train.freeze": str, "eval.tasks": int, "eval.seeds": int,
              "ablate.kappa": float, "ablate.alpha": float, "ablate.alpha0": float, "ablate.k": int,
              "ablate.tau_m": float}


def _parse_value(key: str, raw: str):
    default = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError("expected true/false")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            item = TUPLE_ITEM[key]
            return tuple(item(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as e:
        kind = type(default).__name__
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind} ({e})") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(lines, source: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, raw = (p.strip() for p in text.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key ({source}:{n})")
        out[key] = raw
    return out


@dataclass
class ExperimentConfig:
    values: dict
    notes: list[str]

    def __getitem__(self, key: str):
        return self.values[key]

    # typed views -------------------------------------------------------------
    def dims(self, d_s: int) -> Dims:
        v = self.values
        return Dims(d_s=d_s, horizon=v["model.horizon"], K=v["model.K"], basis_hidden=v["model.basis_hidden"],
                    gate_hidden=v["model.gate_hidden"], expert_hidden=v["model.expert_hidden"],
                    coeff_scale=v["diffusion.coeff_scale"])

    def gate_hyper(self) -> GateHyper:
        v = self.values
        return GateHyper(alpha=v["gate.alpha"], alpha0=v["gate.alpha0"], kappa=v["gate.kappa"],
                         ablation=v["gate.kappa"] == 0 or v["gate.alpha0"] == 0)

    def train_config(self) -> TrainConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("train.")}
        return TrainConfig(**kw)

    def budget(self) -> ActivationBudget:
        v = self.values
        return ActivationBudget(k=v["activation.k"], tau_m=v["activation.tau_m"], mode=v["activation.mode"],
                                mass=v["activation.mass"])

    def schedule_params(self) -> tuple[int, float, float]:
        v = self.values
        return v["diffusion.steps"], v["diffusion.beta_start"], v["diffusion.beta_end"]

    def dump(self) -> str:
        lines = []
        for key, (_, doc) in SCHEMA.items():
            lines.append(f"{key} = {_format_value(self.values[key])}  # {doc}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved"
        path.write_text(self.dump())
        return path


def validate(values: dict) -> list[str]:
    """Run every component's own checks; returns informational notes."""
    notes = []
    v = values
    n_tasks = len(synthenv.default_suite())
    for key in ("data.train_tasks", "eval.tasks"):
        if not v[key]:
            raise ConfigError(f"{key}: needs at least one task")
        bad = [t for t in v[key] if not 0 <= t < n_tasks]
        if bad:
            raise ConfigError(f"{key}: task ids {bad} outside [0, {n_tasks})")
    if not 0 <= v["finetune.task"] < n_tasks or not 0 <= v["infer.task"] < n_tasks:
        raise ConfigError(f"finetune.task / infer.task must lie in [0, {n_tasks})")
    for key in ("data.demos_per_task", "finetune.demos", "eval.episodes", "eval.probe_demos"):
        if v[key] < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if v["eval.max_steps"] < 0:
        raise ConfigError("eval.max_steps: must be >= 0")
    if not v["eval.seeds"]:
        raise ConfigError("eval.seeds: needs at least one seed")
    for key in ("model.basis_hidden", "model.gate_hidden", "model.expert_hidden"):
        if any(h < 1 for h in v[key]):
            raise ConfigError(f"{key}: widths must be >= 1")
    if not v["diffusion.coeff_scale"] > 0:
        raise ConfigError("diffusion.coeff_scale: must be > 0")
    if v["model.horizon"] < 1:
        raise ConfigError("model.horizon: must be >= 1")
    cfg = ExperimentConfig(v, notes)
    checks = [
        ("model", lambda: cfg.dims(synthenv.state_dim(n_tasks))),
        ("gate", cfg.gate_hyper),
        ("train", cfg.train_config),
        ("activation", cfg.budget),
        ("diffusion", lambda: make_schedule(*cfg.schedule_params())),
    ]
    for prefix, check in checks:
        try:
            check()
        except (ValueError, TypeError) as e:
            msg = str(e)
            raise ConfigError(msg if msg.startswith(prefix + ".") else f"{prefix}: {msg}") from None
    if v["activation.k"] > v["model.K"]:
        raise ConfigError(f"activation.k: {v['activation.k']} exceeds model.K = {v['model.K']}")
    if any(k < 1 or k > v["model.K"] for k in v["ablate.k"]):
        raise ConfigError("ablate.k: entries must lie in [1, model.K]")
    if any(not 0 <= t <= 1 for t in v["ablate.tau_m"]):
        raise ConfigError("ablate.tau_m: entries must lie in [0, 1]")
    if v["gate.kappa"] == 0:
        notes.append("gate.kappa = 0: sticky prior disabled (ablation mode)")
    if v["gate.alpha0"] == 0:
        notes.append("gate.alpha0 = 0: usage anchor disabled (ablation mode, prior floored)")
    return notes


def parse_config(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> ExperimentConfig:
    """Defaults <- file <- overrides (``key=value`` strings or a dict)."""
    raw: dict[str, str] = {}
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from None
        raw.update(parse_lines(text.splitlines(), str(p)))
    if isinstance(overrides, dict):
        items = [f"{k}={_format_value(v) if not isinstance(v, str) else v}" for k, v in overrides.items()]
    else:
        items = list(overrides or [])
    raw.update(parse_lines(items, "override"))
    values = {k: d for k, (d, _) in SCHEMA.items()}
    for k, r in raw.items():
        values[k] = _parse_value(k, r)
    notes = validate(values)
    return ExperimentConfig(values, notes)

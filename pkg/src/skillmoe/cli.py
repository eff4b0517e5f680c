"""Command-line entry point: data generation, training, transfer, evaluation and sweeps."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import synthenv
from .config import ConfigError, ExperimentConfig, parse_config
from .inference import ActivationBudget, act, basis, evaluate, posterior_mean, router_mean, select_active
from .metrics import (active_param_count, emit_metrics, flip_rate, mean_segment_length, principal_angles,
                      trace_fraction_inside)
from .trainer import SkillPolicy, finetune, finetune_router, init_policy, load_checkpoint, prepare, train_loop

log = logging.getLogger("skillmoe")

COMMANDS = ("gen-data", "train", "finetune", "finetune-router", "eval", "infer", "ablate-gates",
            "ablate-activation", "metrics")
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skillmoe", description="Skill mixture-of-experts diffusion policy on a toy bimanual suite.")
    p.add_argument("command", choices=COMMANDS, help="subcommand")
    p.add_argument("--config", help="key = value config file (# comments)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv", help="metrics file format")
    return p


# -- shared helpers ------------------------------------------------------------------
def chunk_subspace(spec: synthenv.TaskSpec, phases, horizon: int) -> np.ndarray:
    """Ground-truth subspace of a flattened action chunk: block h spans phase_h's coordinates.

    Positions past the end of an episode (zero padding) contribute no directions.
    """
    d = synthenv.ACTION_DIM
    cols = []
    for h in range(horizon):
        if h >= len(phases):
            break
        G = synthenv.ground_truth_subspace(spec, int(phases[h]))
        for c in range(G.shape[1]):
            v = np.zeros(horizon * d)
            v[h * d:(h + 1) * d] = G[:, c]
            cols.append(v)
    return np.stack(cols, axis=1)


def probe_demos(cfg: ExperimentConfig, tasks) -> list[synthenv.Trajectory]:
    """Held-out demos (seed offset from the training data) used for gate/subspace diagnostics."""
    suite = synthenv.default_suite()
    return synthenv.gen_demos([suite[t] for t in tasks], cfg["eval.probe_demos"], cfg["data.seed"] + 1000)


def gate_diagnostics(policy: SkillPolicy, demos, budget: ActivationBudget) -> dict[str, float]:
    """Router-vs-posterior agreement, temporal smoothness and skill-subspace alignment on demos."""
    suite = synthenv.default_suite()
    H = policy.dims.horizon
    flips, segs, tv, inside, angles, sizes = [], [], [], [], [], []
    for tr, prep in zip(demos, prepare(demos, H)):
        spec = suite[tr.task_id]
        g = router_mean(policy, prep.states)
        q = posterior_mean(policy, prep.states, prep.chunks)
        tv.extend(0.5 * np.abs(g - q).sum(axis=1))
        if len(g) >= 2:
            flips.append(flip_rate(g))
        segs.append(mean_segment_length(g))
        B = basis(policy, prep.states)
        for t in range(len(g)):
            S = select_active(g[t], budget)
            sizes.append(len(S))
            idx = list(S.indices)
            M = (B[t][:, idx] * S.masses[idx]) @ B[t][:, idx].T
            G = chunk_subspace(spec, tr.phases[t:t + H], H)
            inside.append(trace_fraction_inside(M, G))
            top = B[t][:, [idx[0]]]
            angles.append(principal_angles(top, G)[0] if G.shape[1] else np.pi / 2)
    inside = np.array(inside)
    return {
        "flip_rate": float(np.mean(flips)),
        "segment_length": float(np.mean(segs)),
        "router_posterior_tv": float(np.mean(tv)),
        "skill_inside_frac": float(np.mean(inside >= 0.8)),
        "skill_inside_mean": float(np.mean(inside)),
        "top_skill_angle": float(np.mean(angles)),
        "probe_mean_active": float(np.mean(sizes)),
    }


def _load_train_data(cfg: ExperimentConfig) -> list[synthenv.Trajectory]:
    if cfg["data.path"]:
        trajs, _ = synthenv.load_dataset(cfg["data.path"])
        wanted = set(cfg["data.train_tasks"])
        return [t for t in trajs if t.task_id in wanted]
    suite = synthenv.default_suite()
    return synthenv.gen_demos([suite[t] for t in cfg["data.train_tasks"]], cfg["data.demos_per_task"],
                              cfg["data.seed"])


def _finetune_data(cfg: ExperimentConfig) -> list[synthenv.Trajectory]:
    spec = synthenv.default_suite()[cfg["finetune.task"]]
    return synthenv.gen_demos([spec], cfg["finetune.demos"], cfg["finetune.data_seed"])


def _require_checkpoint(cfg: ExperimentConfig) -> SkillPolicy:
    path = cfg["run.checkpoint"]
    if not path:
        raise ConfigError("run.checkpoint: this command needs a checkpoint (set run.checkpoint=DIR)")
    return load_checkpoint(path)


def new_policy(cfg: ExperimentConfig, d_s: int) -> SkillPolicy:
    return init_policy(cfg.dims(d_s), cfg.gate_hyper(), cfg.train_config(), cfg.schedule_params())


def episode_rows(run_id: str, seed: int, episodes, policy: SkillPolicy) -> list[dict]:
    suite = synthenv.default_suite()
    rows = []
    for n, ep in enumerate(episodes):
        spec = suite[ep.task_id]
        g = np.array(ep.gates) if ep.gates else np.zeros((0, policy.dims.K))
        rows.append({
            "run": run_id, "seed": seed, "task": spec.name, "episode": n, "success": ep.success,
            "progress": ep.progress(spec), "steps": len(ep.actions),
            "mean_active": float(np.mean([len(a) for a in ep.active])) if ep.active else 0.0,
            "flip_rate": flip_rate(g) if len(g) >= 2 else 0.0,
            "segment_length": mean_segment_length(g) if len(g) else 0.0,
        })
    return rows


def write_traces(path: Path, episodes) -> None:
    with open(path, "w") as f:
        for n, ep in enumerate(episodes):
            rec = {"episode": n, "task_id": ep.task_id, "success": ep.success,
                   "gates": np.asarray(ep.gates).round(12).tolist(), "active": [list(a) for a in ep.active],
                   "phases": [int(p) for p in ep.phases]}
            f.write(json.dumps(rec) + "\n")


def read_traces(path: Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def run_eval(cfg: ExperimentConfig, policy: SkillPolicy, out: Path, budget: ActivationBudget | None = None,
             fmt: str = "csv", tasks=None) -> dict:
    """Episodes for every seed plus diagnostics; writes episodes, summary and traces."""
    budget = budget or cfg.budget()
    suite = synthenv.default_suite()
    tasks = cfg["eval.tasks"] if tasks is None else tasks
    out.mkdir(parents=True, exist_ok=True)
    rows, trace = [], []
    for seed in cfg["eval.seeds"]:
        eps = evaluate(policy, [suite[t] for t in tasks], cfg["eval.episodes"], seed, budget, cfg["eval.max_steps"])
        rows += episode_rows(cfg["run.id"], seed, eps, policy)
        trace += [a for ep in eps for a in ep.active]
        write_traces(out / f"traces_seed{seed}.jsonl", eps)
    emit_metrics(rows, out / f"episodes.{fmt}", fmt)
    total, active = active_param_count(policy, trace)
    summary = {"run": cfg["run.id"], "success": float(np.mean([r["success"] for r in rows])),
               "progress": float(np.mean([r["progress"] for r in rows])),
               "mean_active": float(np.mean([len(a) for a in trace])) if trace else 0.0,
               "params_total": total, "params_active": active, "active_ratio": active / total}
    for t in tasks:
        summary[f"success_{suite[t].name}"] = float(np.mean([r["success"] for r in rows if r["task"] == suite[t].name]))
    summary.update(gate_diagnostics(policy, probe_demos(cfg, tasks), budget))
    summary["act_latency_ms"] = act_latency(policy, budget)
    emit_metrics([summary], out / f"summary.{fmt}", fmt)
    return summary


def act_latency(policy: SkillPolicy, budget: ActivationBudget, calls: int = 30, warmup: int = 10) -> float:
    spec = synthenv.default_suite()[0]
    s = synthenv.reset(spec, np.random.default_rng(0))
    times = []
    for i in range(calls):
        t0 = time.perf_counter()
        act(policy, s, budget, np.random.default_rng(i))
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.mean(times[warmup:]))


# -- commands ----------------------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    suite = synthenv.default_suite()
    trajs = synthenv.gen_demos([suite[t] for t in cfg["data.train_tasks"]], cfg["data.demos_per_task"],
                               cfg["data.seed"])
    synthenv.save_dataset(out / "data", trajs, {"seed": cfg["data.seed"], "tasks": list(cfg["data.train_tasks"]),
                                                "demos_per_task": cfg["data.demos_per_task"]})
    log.info("wrote %d demos to %s", len(trajs), out / "data")


def cmd_train(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    trajs = _load_train_data(cfg)
    pol = new_policy(cfg, trajs[0].states.shape[1])
    _, rows = train_loop(pol, trajs, out_dir=out / "checkpoints", run_id=cfg["run.id"])
    emit_metrics(rows, out / f"train.{fmt}", fmt)


def cmd_finetune(cfg: ExperimentConfig, out: Path, fmt: str, router_only: bool) -> None:
    init = _require_checkpoint(cfg)
    trajs = _finetune_data(cfg)
    if router_only:
        _, rows = finetune_router(init, trajs, cfg.train_config(), cfg["finetune.train_posterior"],
                                  out / "checkpoints", cfg["run.id"])
    else:
        _, rows = finetune(init, trajs, cfg.train_config(), out / "checkpoints", cfg["run.id"])
    emit_metrics(rows, out / f"train.{fmt}", fmt)


def cmd_eval(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    pol = _require_checkpoint(cfg)
    summary = run_eval(cfg, pol, out, fmt=fmt)
    log.info("success %.3f  active ratio %.3f  flip rate %.3f", summary["success"], summary["active_ratio"],
             summary["flip_rate"])


def cmd_infer(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    from .inference import rollout
    pol = _require_checkpoint(cfg)
    spec = synthenv.default_suite()[cfg["infer.task"]]
    s0 = synthenv.reset(spec, np.random.default_rng([cfg["infer.seed"], spec.task_id, 0, 7919]))
    ep = rollout(pol, spec, s0, cfg.budget(), cfg["eval.max_steps"], np.random.default_rng(cfg["infer.seed"]))
    rows = []
    for t, a in enumerate(ep.actions):
        row = {"step": t, **{f"a{i}": float(a[i]) for i in range(len(a))},
               "active": " ".join(map(str, ep.active[t])), "gate_argmax": int(np.argmax(ep.gates[t])),
               "phase": int(ep.phases[t])}
        rows.append(row)
    header = ["step"] + [f"a{i}" for i in range(synthenv.ACTION_DIM)] + ["active", "gate_argmax", "phase"]
    emit_metrics(rows, out / f"actions.{fmt}", fmt, header=header)
    log.info("%s: success=%s progress=%.2f steps=%d", spec.name, ep.success, ep.progress(spec), len(ep.actions))


def cmd_ablate_gates(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    trajs = _load_train_data(cfg)
    rows = []
    for param in ("kappa", "alpha", "alpha0"):
        for value in cfg[f"ablate.{param}"]:
            cell = parse_config(None, {**cfg.values, f"gate.{param}": value})
            cell_dir = out / f"{param}_{value:g}"
            cell.echo(cell_dir)
            pol = new_policy(cell, trajs[0].states.shape[1])
            train_loop(pol, trajs, out_dir=None, run_id=f"{param}={value:g}")
            s = run_eval(cell, pol, cell_dir, fmt=fmt)
            rows.append({"param": param, "value": value, "success": s["success"], "progress": s["progress"],
                         "flip_rate": s["flip_rate"], "segment_length": s["segment_length"],
                         "mean_active": s["mean_active"]})
    emit_metrics(rows, out / f"ablate_gates.{fmt}", fmt)


def activation_sweep(cfg: ExperimentConfig, pol: SkillPolicy, out: Path, fmt: str = "csv") -> list[dict]:
    """Success and mean |S| over the k grid (top-k mode) and tau_m grid (coverage, k = K).

    Mean |S| is measured on a fixed batch of held-out demo states so that
    the comparison across budgets does not depend on where rollouts go.
    """
    suite = synthenv.default_suite()
    tasks = cfg["eval.tasks"]
    probe = np.concatenate([p.states for p in prepare(probe_demos(cfg, tasks), pol.dims.horizon)])
    g = router_mean(pol, probe)
    K = pol.dims.K
    budgets = [("topk", k, 1.0, ActivationBudget(k=k, tau_m=1.0, mode="topk", mass=cfg["activation.mass"]))
               for k in cfg["ablate.k"]]
    budgets += [("coverage", K, t, ActivationBudget(k=K, tau_m=t, mode="coverage", mass=cfg["activation.mass"]))
                for t in cfg["ablate.tau_m"]]
    rows = []
    for sweep, k, tau, b in budgets:
        sizes = [len(select_active(row, b)) for row in g]
        eps = evaluate(pol, [suite[t] for t in tasks], cfg["eval.episodes"], cfg["eval.seeds"][0], b,
                       cfg["eval.max_steps"])
        trace = [a for ep in eps for a in ep.active]
        total, active = active_param_count(pol, trace)
        rows.append({"sweep": sweep, "k": k, "tau_m": tau, "success": float(np.mean([e.success for e in eps])),
                     "mean_active": float(np.mean(sizes)),
                     "rollout_mean_active": float(np.mean([len(a) for a in trace])) if trace else 0.0,
                     "active_ratio": active / total})
    emit_metrics(rows, out / f"ablate_activation.{fmt}", fmt)
    return rows


def cmd_ablate_activation(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    activation_sweep(cfg, _require_checkpoint(cfg), out, fmt)


def cmd_metrics(cfg: ExperimentConfig, out: Path, fmt: str) -> None:
    """Recompute trace diagnostics from the traces of an eval directory (run.checkpoint's policy)."""
    src = Path(cfg["run.out_dir"])
    files = sorted(src.glob("traces_seed*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no traces_seed*.jsonl files in {src}")
    pol = _require_checkpoint(cfg)
    rows = []
    for f in files:
        recs = read_traces(f)
        gates = [np.array(r["gates"]) for r in recs]
        trace = [a for r in recs for a in r["active"]]
        total, active = active_param_count(pol, trace)
        rows.append({"traces": f.name, "episodes": len(recs),
                     "success": float(np.mean([r["success"] for r in recs])),
                     "flip_rate": float(np.mean([flip_rate(g) for g in gates if len(g) >= 2])),
                     "segment_length": float(np.mean([mean_segment_length(g) for g in gates if len(g)])),
                     "mean_active": float(np.mean([len(a) for a in trace])), "active_ratio": active / total})
    emit_metrics(rows, out / f"metrics.{fmt}", fmt)


def cmd_dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"skillmoe: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        cfg = parse_config(args.config, args.set)
    except ConfigError as e:
        print(f"skillmoe: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, cfg["run.log_level"].upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(message)s")
    for note in cfg.notes:
        log.info("note: %s", note)
    out = Path(cfg["run.out_dir"])
    handlers = {
        "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
        "ablate-gates": cmd_ablate_gates, "ablate-activation": cmd_ablate_activation, "metrics": cmd_metrics,
        "finetune": lambda c, o, f: cmd_finetune(c, o, f, router_only=False),
        "finetune-router": lambda c, o, f: cmd_finetune(c, o, f, router_only=True),
    }
    try:
        if args.command == "metrics":
            dest = out / "recomputed"
        else:
            dest = out
        cfg.echo(dest)
        handlers[args.command](cfg, dest, args.format)
    except ConfigError as e:
        print(f"skillmoe: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"skillmoe: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cmd_dispatch())


if __name__ == "__main__":
    main()

"""Planar bimanual toy environment with scripted, phase-structured demonstrations.

State layout (d_s = 14 + n_tasks)::

    0:2 left arm xy   2:4 right arm xy   4 left grip   5 right grip
    6:8 object 1 xy   8:10 object 2 xy   10:12 goal 1 xy   12:14 goal 2 xy
    14: task one-hot

Action layout (d = 6): left dx, dy, right dx, dy, left grip rate, right grip
rate. Grip values live in [0, 1] (1 = closed) and move by at most 0.5 per
step. Every phase of the scripted expert acts only on either the translation
coordinates (0..3) or the gripper coordinates (4, 5), which is what gives the
demonstrations their known per-phase subspace structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTION_DIM = 6
BASE_STATE_DIM = 14
WORKSPACE = 1.0
GRIP_RATE = 0.5
GRASP_RADIUS = 0.05
GAIN = 0.3
CLOSED = 0.9
OPEN = 0.1
SCRIPT_TOL = 0.01       # scripted controller switches phase at this distance
MILESTONE_TOL = 0.05    # success scoring is looser than the controller
EPISODE_CAP = 120

ARM = {"l": slice(0, 2), "r": slice(2, 4)}
GRIP = {"l": 4, "r": 5}
OBJ = {1: slice(6, 8), 2: slice(8, 10)}
GOAL = {1: slice(10, 12), 2: slice(12, 14)}
TRANSLATION = (0, 1, 2, 3)
GRIPPER = (4, 5)
KIND_COORDS = {"reach": TRANSLATION, "move": TRANSLATION, "grasp": GRIPPER, "release": GRIPPER}


@dataclass(frozen=True)
class Phase:
    """One step of a task program.

    ``kind`` is reach / grasp / move / release. ``roles`` maps each acting
    arm ('l' or 'r') to the object it works on; moves carry that object to
    the goal named in ``goals``.
    """

    name: str
    kind: str
    roles: tuple[tuple[str, int], ...]
    goals: tuple[int, ...] = ()

    @property
    def coords(self) -> tuple[int, ...]:
        return KIND_COORDS[self.kind]


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    phases: tuple[Phase, ...]
    handoff: bool = False
    cap: int = EPISODE_CAP

    def phase_index(self, phase: str | int) -> int:
        if isinstance(phase, (int, np.integer)):
            if not 0 <= phase < len(self.phases):
                raise KeyError(f"task {self.name} has no phase {phase}")
            return int(phase)
        for i, p in enumerate(self.phases):
            if p.name == phase:
                return i
        raise KeyError(f"task {self.name} has no phase {phase!r}")


def _reach(name, *roles):
    return Phase(name, "reach", tuple(roles))


def _grasp(name, *roles):
    return Phase(name, "grasp", tuple(roles))


def _move(name, roles, goals):
    return Phase(name, "move", tuple(roles), tuple(goals))


def _release(name, roles, goals):
    return Phase(name, "release", tuple(roles), tuple(goals))


def default_suite() -> list[TaskSpec]:
    """Six training tasks followed by two arm-wise recombination tasks."""
    L1, R2, R1 = ("l", 1), ("r", 2), ("r", 1)
    return [
        TaskSpec(0, "reach-left", (_reach("reach_l", L1),)),
        TaskSpec(1, "reach-right", (_reach("reach_r", R2),)),
        TaskSpec(2, "pick-left", (_reach("reach_l", L1), _grasp("grasp_l", L1), _move("move_l", [L1], [1]))),
        TaskSpec(3, "pick-right", (_reach("reach_r", R2), _grasp("grasp_r", R2), _move("move_r", [R2], [2]))),
        TaskSpec(4, "handover", (
            _reach("reach_l", L1), _grasp("grasp_l", L1), _move("move_l", [L1], [1]),
            _release("release_l", [L1], [1]),
            _reach("reach_r", R1), _grasp("grasp_r", R1), _move("move_r", [R1], [2]),
            _release("release_r", [R1], [2]),
        ), handoff=True),
        TaskSpec(5, "pick-place-both", (
            _reach("reach_lr", L1, R2), _grasp("grasp_lr", L1, R2),
            _move("move_lr", [L1, R2], [1, 2]), _release("release_lr", [L1, R2], [1, 2]),
        )),
        TaskSpec(6, "reach-left+pick-right", (
            _reach("reach_lr", L1, R2), _grasp("grasp_r", R2), _move("move_r", [R2], [2]),
        )),
        TaskSpec(7, "pick-left+reach-right", (
            _reach("reach_lr", L1, R2), _grasp("grasp_l", L1), _move("move_l", [L1], [1]),
        )),
    ]


TRAIN_TASKS = (0, 1, 2, 3, 4, 5)
COMPOSE_TASKS = (6, 7)
REACH_TASKS = (0, 1)


def state_dim(n_tasks: int) -> int:
    return BASE_STATE_DIM + n_tasks


# -- dynamics ---------------------------------------------------------------
def env_step(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Point-mass arms, rate-limited grippers, objects carried by closed grippers."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != ACTION_DIM:
        raise ValueError(f"action must have {ACTION_DIM} entries, got {action.shape[-1]}")
    if not np.all(np.isfinite(action)):
        raise ValueError("env_step: non-finite action")
    s = np.array(state, dtype=np.float64)
    new = s.copy()
    for arm in ("l", "r"):
        new[ARM[arm]] = np.clip(s[ARM[arm]] + action[ARM[arm]], -WORKSPACE, WORKSPACE)
        g = GRIP[arm]
        new[g] = np.clip(s[g] + np.clip(action[g], -GRIP_RATE, GRIP_RATE), 0.0, 1.0)
    for obj in (1, 2):
        o = s[OBJ[obj]]
        for arm in ("l", "r"):
            if s[GRIP[arm]] >= CLOSED and np.linalg.norm(o - s[ARM[arm]]) <= GRASP_RADIUS:
                new[OBJ[obj]] = o + (new[ARM[arm]] - s[ARM[arm]])
                break
    return new


# -- phase logic ------------------------------------------------------------
def _dist(a, b) -> float:
    return float(np.linalg.norm(a - b))


def phase_done(state: np.ndarray, phase: Phase, tol: float = SCRIPT_TOL, strict: bool = True) -> bool:
    """Post-condition of ``phase`` in ``state``.

    ``strict`` uses the scripted controller's thresholds (fully closed /
    fully open grippers); the lenient form is what milestones use.
    """
    closed = 1.0 - 1e-9 if strict else CLOSED
    opened = 1e-9 if strict else OPEN
    for k, (arm, obj) in enumerate(phase.roles):
        at_obj = _dist(state[ARM[arm]], state[OBJ[obj]]) <= (tol if phase.kind == "reach" else GRASP_RADIUS)
        grip = state[GRIP[arm]]
        if phase.kind == "reach":
            ok = at_obj
        elif phase.kind == "grasp":
            ok = at_obj and grip >= closed
        elif phase.kind == "move":
            ok = at_obj and _dist(state[OBJ[obj]], state[GOAL[phase.goals[k]]]) <= tol
        else:  # release
            ok = grip <= opened and _dist(state[OBJ[obj]], state[GOAL[phase.goals[k]]]) <= tol
        if not ok:
            return False
    return True


def current_phase(state: np.ndarray, spec: TaskSpec) -> int:
    """Index of the phase the scripted expert is in; len(phases) when done.

    The latest phase whose post-condition holds marks progress, so the
    expert is a pure function of the state.
    """
    for i in range(len(spec.phases) - 1, -1, -1):
        if phase_done(state, spec.phases[i]):
            return i + 1
    return 0


def scripted_expert(state: np.ndarray, spec: TaskSpec) -> tuple[np.ndarray, int]:
    """Proportional controller for the current phase; returns (action, phase index)."""
    idx = current_phase(state, spec)
    a = np.zeros(ACTION_DIM)
    if idx >= len(spec.phases):
        return a, len(spec.phases) - 1
    ph = spec.phases[idx]
    for k, (arm, obj) in enumerate(ph.roles):
        if ph.kind == "reach":
            a[ARM[arm]] = GAIN * (state[OBJ[obj]] - state[ARM[arm]])
        elif ph.kind == "grasp":
            a[GRIP[arm]] = min(GRIP_RATE, 1.0 - state[GRIP[arm]])
        elif ph.kind == "move":
            a[ARM[arm]] = GAIN * (state[GOAL[ph.goals[k]]] - state[OBJ[obj]])
        else:
            a[GRIP[arm]] = -min(GRIP_RATE, state[GRIP[arm]])
    # arms already at their post-condition hold still
    for arm, obj in ph.roles:
        if ph.kind == "reach" and _dist(state[ARM[arm]], state[OBJ[obj]]) <= SCRIPT_TOL:
            a[ARM[arm]] = 0.0
    return a, idx


# -- episodes ---------------------------------------------------------------
def reset(spec: TaskSpec, rng: np.random.Generator, n_tasks: int = 8) -> np.ndarray:
    s = np.zeros(state_dim(n_tasks))
    s[ARM["l"]] = [-0.5 + rng.uniform(-0.1, 0.1), -0.8 + rng.uniform(-0.1, 0.1)]
    s[ARM["r"]] = [0.5 + rng.uniform(-0.1, 0.1), -0.8 + rng.uniform(-0.1, 0.1)]
    s[OBJ[1]] = [rng.uniform(-0.8, -0.2), rng.uniform(-0.3, 0.3)]
    s[OBJ[2]] = [rng.uniform(0.2, 0.8), rng.uniform(-0.3, 0.3)]
    if spec.handoff:
        s[GOAL[1]] = [rng.uniform(-0.15, 0.15), rng.uniform(0.3, 0.6)]
    else:
        s[GOAL[1]] = [rng.uniform(-0.8, -0.2), rng.uniform(0.5, 0.9)]
    s[GOAL[2]] = [rng.uniform(0.2, 0.8), rng.uniform(0.5, 0.9)]
    s[BASE_STATE_DIM + spec.task_id] = 1.0
    return s


@dataclass
class Trajectory:
    """``states`` has one more row than ``actions``: it ends with the final state."""

    task_id: int
    states: np.ndarray
    actions: np.ndarray
    phases: np.ndarray
    success: bool = False

    def __len__(self) -> int:
        return len(self.actions)


def run_scripted(spec: TaskSpec, s0: np.ndarray) -> Trajectory:
    states, actions, phases = [s0], [], []
    s = s0
    for _ in range(spec.cap):
        if current_phase(s, spec) >= len(spec.phases):
            break
        a, ph = scripted_expert(s, spec)
        s = env_step(s, a)
        states.append(s)
        actions.append(a)
        phases.append(ph)
    traj = Trajectory(spec.task_id, np.array(states), np.array(actions).reshape(-1, ACTION_DIM),
                      np.array(phases, dtype=np.int64))
    traj.success = len(traj) > 0 and success_check(traj, spec) == 1.0
    return traj


def success_check(traj: Trajectory, spec: TaskSpec) -> float:
    """Fraction of phase milestones reached in order (1.0 = success)."""
    if len(traj.states) == 0 or len(traj) == 0:
        return 0.0
    k = 0
    for s in traj.states:
        while k < len(spec.phases) and phase_done(s, spec.phases[k], tol=MILESTONE_TOL, strict=False):
            k += 1
        if k == len(spec.phases):
            break
    return k / len(spec.phases)


def gen_demos(specs: list[TaskSpec], n: int, seed: int, n_tasks: int = 8,
              max_retries: int = 10) -> list[Trajectory]:
    """``n`` successful scripted episodes per task, deterministic in (specs, n, seed)."""
    if n < 1:
        raise ValueError("gen_demos: n must be >= 1")
    out = []
    for spec in specs:
        for ep in range(n):
            for retry in range(max_retries + 1):
                rng = np.random.default_rng([seed, spec.task_id, ep, retry])
                traj = run_scripted(spec, reset(spec, rng, n_tasks))
                if traj.success:
                    out.append(traj)
                    break
            else:
                raise RuntimeError(f"scripted expert failed {max_retries + 1} times on {spec.name}")
    return out


def ground_truth_subspace(spec: TaskSpec, phase: str | int, d: int = ACTION_DIM) -> np.ndarray:
    """Coordinate-aligned orthonormal basis (d x r) of a phase's action subspace."""
    ph = spec.phases[spec.phase_index(phase)]
    return np.eye(d)[:, list(ph.coords)]


def replay(s0: np.ndarray, actions: np.ndarray) -> np.ndarray:
    states = [np.asarray(s0, dtype=np.float64)]
    for a in actions:
        states.append(env_step(states[-1], a))
    return np.array(states)


# -- dataset files ----------------------------------------------------------
DATASET_VERSION = 1


def save_dataset(path: str | Path, trajs: list[Trajectory], meta: dict | None = None) -> None:
    """Write ``<path>/manifest.json`` plus ``<path>/data.bin`` (little-endian float64).

    Each trajectory record in the blob is states (T+1 x d_s), then actions
    (T x 6), then phase labels (T, stored as float64), at the offsets listed
    in the manifest.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for tr in trajs:
        parts = [tr.states.reshape(-1), tr.actions.reshape(-1), tr.phases.astype(np.float64)]
        n = sum(p.size for p in parts)
        records.append({"task_id": int(tr.task_id), "steps": len(tr), "state_dim": int(tr.states.shape[1]),
                        "offset": offset, "length": n, "success": bool(tr.success)})
        chunks.extend(parts)
        offset += n
    blob = np.concatenate(chunks).astype("<f8") if chunks else np.zeros(0, "<f8")
    manifest = {"version": DATASET_VERSION, "dtype": "float64-le", "meta": meta or {},
                "count": len(trajs), "records": records}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (path / "data.bin").write_bytes(blob.tobytes())


def load_dataset(path: str | Path) -> tuple[list[Trajectory], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"dataset version {manifest.get('version')} != supported {DATASET_VERSION}")
    raw = (path / "data.bin").read_bytes()
    if len(raw) % 8:
        raise ValueError("dataset blob is not a whole number of float64 values")
    blob = np.frombuffer(raw, dtype="<f8")
    out = []
    for r in manifest["records"]:
        T, ds = r["steps"], r["state_dim"]
        if r["offset"] + r["length"] > blob.size or r["length"] != (T + 1) * ds + T * ACTION_DIM + T:
            raise ValueError(f"dataset record at offset {r['offset']} is truncated or inconsistent")
        seg = blob[r["offset"]:r["offset"] + r["length"]]
        states = seg[:(T + 1) * ds].reshape(T + 1, ds).copy()
        actions = seg[(T + 1) * ds:(T + 1) * ds + T * ACTION_DIM].reshape(T, ACTION_DIM).copy()
        phases = seg[(T + 1) * ds + T * ACTION_DIM:].astype(np.int64)
        out.append(Trajectory(r["task_id"], states, actions, phases, r["success"]))
    return out, manifest["meta"]

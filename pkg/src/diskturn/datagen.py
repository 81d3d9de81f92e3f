"""Offline dataset construction.

One rollout: sample an initial state, optimize a short all-regrasp segment to
establish a stable grasp, execute the contact sequence with the receding
horizon optimizer (no value term), then label every sub-task trajectory with
the shared final goal error. Datasets are grouped per contact mode and saved
as JSON-lines with a manifest describing seeds, filter counts and configs.
"""

import json
import os
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from typing import Optional

import numpy as np

from .model import ContactMode, Control, EnvSpec, InputError, State, Trajectory, fk_all
from .sim import InitSampler, SimConfig, resolve_and_filter, sample_initial_state
from .sim import step as sim_step
from .solver import (
    CostWeights,
    ExecutionEnv,
    SolverConfig,
    SolverError,
    SubTaskProblem,
    receding_horizon_execute,
    solve,
)
from .util import make_rng, wrap_to_pi
from .valuefn import RHO_MAX

DATASET_SCHEMA = "diskturn-dataset-v1"
MANIFEST_SCHEMA = "diskturn-manifest-v1"
DEFAULT_TURN_OFFSET = -np.pi / 8


@dataclass
class ContactSequence:
    """Ordered (mode, horizon) pairs making up one full task cycle."""

    entries: tuple

    def __post_init__(self):
        ent = []
        for mode, horizon in self.entries:
            if not isinstance(mode, ContactMode):
                mode = ContactMode(tuple(mode))
            horizon = int(horizon)
            if horizon < 1:
                raise InputError("sequence horizons must be >= 1")
            ent.append((mode, horizon))
        if not ent:
            raise InputError("contact sequence must be nonempty")
        self.entries = tuple(ent)

    @classmethod
    def default(cls) -> "ContactSequence":
        # finger 0 keeps contact while the other two re-place, then all three
        # stick for the turn segment
        return cls(((ContactMode((1, 0, 0)), 6), (ContactMode((1, 1, 1)), 8)))

    def mode_keys(self) -> list:
        seen = []
        for mode, _ in self.entries:
            if mode.key() not in seen:
                seen.append(mode.key())
        return seen

    def to_json(self) -> list:
        return [[list(m.bits), h] for m, h in self.entries]

    @classmethod
    def from_json(cls, doc) -> "ContactSequence":
        return cls(tuple((ContactMode(tuple(b)), h) for b, h in doc))


def zeta_for(mode: ContactMode, first_state: State) -> Optional[float]:
    """Auxiliary input: turns carry the disk angle at the sub-task start."""
    if mode.n_contact == mode.n_f:
        return float(first_state.psi)
    return None


@dataclass
class Sample:
    """One sub-task execution: trajectory, auxiliary input, shared label."""

    tau: Trajectory
    zeta: Optional[float]
    rho: float

    def __post_init__(self):
        self.rho = float(self.rho)
        if not 0.0 <= self.rho <= RHO_MAX:
            raise InputError(f"label {self.rho} outside [0, {RHO_MAX}]")


def label(final_state: State, psi_g: float) -> float:
    """Squared wrapped goal error with the ceiling applied."""
    err = wrap_to_pi(final_state.psi - psi_g)
    return float(min(err * err, RHO_MAX))


# ---------------------------------------------------------------------------
# precursory grasp
# ---------------------------------------------------------------------------


def stable_grasp_check(spec: EnvSpec, sim_config: SimConfig, state: State) -> bool:
    """Every fingertip near the surface and enough tangential capacity to hold
    the disk statically against the worst-case external torque."""
    tips, _ = fk_all(spec, state.q, with_jacobian=False)
    dist = np.abs(np.linalg.norm(tips - spec.pivot, axis=1) - spec.disk_radius)
    if np.any(dist > sim_config.contact_tol):
        return False
    per_finger = min(spec.mu * spec.u_max.f_n, spec.u_max.f_t)
    capacity = spec.n_f * per_finger * spec.disk_radius
    return capacity >= spec.tau_max


def precursory_grasp(
    spec: EnvSpec,
    s_0: State,
    solver_config: SolverConfig,
    sim_config: Optional[SimConfig] = None,
    rng: Optional[np.random.Generator] = None,
    horizon: int = 4,
    weights: Optional[CostWeights] = None,
) -> Optional[State]:
    """All-regrasp segment that moves every fingertip onto the disk.

    Solves the fixed-mode problem with every bit 0, executes the plan through
    the simulator, and returns the resulting state, or None when the solve
    fails or the outcome does not pass the stable-grasp check.
    """
    if sim_config is None:
        sim_config = SimConfig()
    if rng is None:
        rng = make_rng(solver_config.seed, 7)
    mode = ContactMode((0,) * spec.n_f)
    problem = SubTaskProblem(
        spec=spec,
        mode=mode,
        horizon=horizon,
        s0=s_0,
        psi_g=s_0.psi,
        weights=weights if weights is not None else CostWeights(),
    )
    try:
        traj, _ = solve(problem, solver_config, rng=make_rng(solver_config.seed, 3))
    except SolverError:
        return None
    state = s_0
    for control in traj.controls:
        state, _ = sim_step(spec, sim_config, mode, state, control, rng)
    if not stable_grasp_check(spec, sim_config, state):
        return None
    return state


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------


@dataclass
class CollectConfig:
    n_samples: int = 2000
    base_seed: int = 0
    sequence: ContactSequence = field(default_factory=ContactSequence.default)
    turn_offset: float = DEFAULT_TURN_OFFSET
    spec: EnvSpec = field(default_factory=EnvSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    grasp_horizon: int = 4
    workers: int = 1
    max_attempt_factor: int = 20

    def __post_init__(self):
        if self.n_samples < 1:
            raise InputError("n_samples must be >= 1")
        if self.workers < 1:
            raise InputError("workers must be >= 1")

    def to_json(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "base_seed": self.base_seed,
            "sequence": self.sequence.to_json(),
            "turn_offset": self.turn_offset,
            "spec": self.spec.to_json(),
            "sim": self.sim.to_json(),
            "solver": self.solver.to_json(),
            "weights": self.weights.to_json(),
            "grasp_horizon": self.grasp_horizon,
            "workers": self.workers,
            "max_attempt_factor": self.max_attempt_factor,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CollectConfig":
        doc = dict(doc)
        doc["sequence"] = ContactSequence.from_json(doc["sequence"])
        doc["spec"] = EnvSpec.from_json(doc["spec"])
        doc["sim"] = SimConfig.from_json(doc["sim"])
        doc["solver"] = SolverConfig.from_json(doc["solver"])
        doc["weights"] = CostWeights.from_json(doc["weights"])
        return cls(**doc)


def _sequence_problems(cfg: CollectConfig) -> list:
    """Sub-task templates with late-bound goals (offsets from the measured
    state at each sub-task's first step)."""
    problems = []
    for mode, horizon in cfg.sequence.entries:
        turn = mode.n_contact == mode.n_f
        problems.append(
            SubTaskProblem(
                spec=cfg.spec,
                mode=mode,
                horizon=horizon,
                s0=None,
                psi_g=None,
                weights=cfg.weights,
                goal_offset=cfg.turn_offset if turn else 0.0,
            )
        )
    return problems


def rollout_attempt(cfg: CollectConfig, attempt: int) -> dict:
    """One fully seeded collection attempt.

    Returns a status record; accepted attempts carry one sample per sub-task
    (completed prefix only when the execution dropped). Pure function of
    (cfg, attempt) so attempts can run in any order or process.
    """
    rng = make_rng(cfg.base_seed, attempt)
    sampler = InitSampler(cfg.spec)
    cand = sample_initial_state(sampler, rng)
    state0 = resolve_and_filter(cfg.spec, cfg.sim, cand)
    if state0 is None:
        return {"attempt": attempt, "status": "init_filtered"}
    grasped = precursory_grasp(
        cfg.spec,
        state0,
        cfg.solver,
        cfg.sim,
        rng=rng,
        horizon=cfg.grasp_horizon,
        weights=cfg.weights,
    )
    if grasped is None:
        return {"attempt": attempt, "status": "grasp_filtered"}
    env = ExecutionEnv(spec=cfg.spec, sim_config=cfg.sim, state=grasped, rng=rng)
    try:
        result = receding_horizon_execute(env, _sequence_problems(cfg), cfg.solver)
    except SolverError:
        return {"attempt": attempt, "status": "solver_failed"}
    if result.dropped:
        rho = RHO_MAX
    else:
        rho = label(result.final_state, result.sub_goals[-1])
    samples = []
    for j, tau in enumerate(result.sub_trajectories):
        mode, nominal = cfg.sequence.entries[j]
        if tau.horizon != nominal:
            continue  # partial sub-task cut short by a drop
        samples.append((mode.key(), Sample(tau, zeta_for(mode, tau.states[0]), rho)))
    return {
        "attempt": attempt,
        "status": "dropped" if result.dropped else "ok",
        "rho": rho,
        "samples": samples,
    }


class _Worker:
    """Picklable attempt runner for the process pool."""

    def __init__(self, cfg_doc: dict):
        self.cfg_doc = cfg_doc
        self.cfg = None

    def __call__(self, attempt: int) -> dict:
        if self.cfg is None:
            self.cfg = CollectConfig.from_json(self.cfg_doc)
        return rollout_attempt(self.cfg, attempt)


def collect(cfg: CollectConfig):
    """Run seeded rollouts until n_samples per mode are accepted.

    Returns (datasets, manifest): datasets maps mode key to a Sample list in
    attempt order. Rollouts are independent, so results do not depend on the
    worker count; output order is canonicalized by attempt index.
    """
    t0 = time.perf_counter()
    counts = {"init_filtered": 0, "grasp_filtered": 0, "solver_failed": 0, "dropped": 0, "ok": 0}
    datasets = {key: [] for key in cfg.sequence.mode_keys()}
    max_attempts = cfg.max_attempt_factor * cfg.n_samples
    accepted = 0
    next_attempt = 0
    pool = Pool(cfg.workers) if cfg.workers > 1 else None
    worker = _Worker(cfg.to_json())
    worker.cfg = cfg
    try:
        while accepted < cfg.n_samples and next_attempt < max_attempts:
            block = min(
                max(cfg.workers * 4, 1), max_attempts - next_attempt, cfg.n_samples - accepted + 8
            )
            idx = range(next_attempt, next_attempt + block)
            records = pool.map(worker, idx) if pool else [worker(a) for a in idx]
            next_attempt += block
            for rec in records:
                if accepted >= cfg.n_samples:
                    break
                counts[rec["status"]] += 1
                if rec["status"] in ("ok", "dropped"):
                    for key, sample in rec["samples"]:
                        datasets[key].append(sample)
                    accepted += 1
    finally:
        if pool:
            pool.close()
            pool.join()
    if accepted < cfg.n_samples:
        raise InputError(
            f"only {accepted}/{cfg.n_samples} rollouts accepted after {next_attempt} attempts"
        )
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "base_seed": cfg.base_seed,
        "n_samples": cfg.n_samples,
        "attempts": sum(counts.values()),
        "filter_counts": counts,
        "per_mode_counts": {key: len(v) for key, v in datasets.items()},
        "config": cfg.to_json(),
        "wall_time": time.perf_counter() - t0,
    }
    return datasets, manifest


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _state_doc(s: State) -> dict:
    return {"q": s.q.tolist(), "psi": s.psi}


def _control_doc(c: Control) -> dict:
    return {"dq": c.dq.tolist(), "f": c.f.tolist(), "tau_e": c.tau_e}


def trajectory_to_json(tau: Trajectory) -> dict:
    return {
        "mode": list(tau.mode.bits),
        "states": [_state_doc(s) for s in tau.states],
        "controls": [_control_doc(c) for c in tau.controls],
    }


def trajectory_from_json(doc: dict) -> Trajectory:
    states = [State(np.asarray(d["q"]), d["psi"]) for d in doc["states"]]
    controls = [
        Control(np.asarray(d["dq"]), np.asarray(d["f"]), d["tau_e"]) for d in doc["controls"]
    ]
    return Trajectory(states, controls, ContactMode(tuple(doc["mode"])))


def save_dataset(path, samples, mode_key: str) -> None:
    """JSON-lines: one header line, then one sample per line."""
    with open(path, "w") as fh:
        json.dump({"schema": DATASET_SCHEMA, "mode": mode_key, "count": len(samples)}, fh)
        fh.write("\n")
        for s in samples:
            json.dump(
                {"tau": trajectory_to_json(s.tau), "zeta": s.zeta, "rho": s.rho},
                fh,
            )
            fh.write("\n")


def iter_dataset(path):
    """Stream (header, sample) without holding the whole file in memory.

    Yields the header dict first, then Sample objects. Malformed content
    raises with the offending line number.
    """
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            if lineno == 1:
                if doc.get("schema") != DATASET_SCHEMA:
                    raise InputError(
                        f"{path}:1: schema {doc.get('schema')!r} != {DATASET_SCHEMA!r}"
                    )
                yield doc
                continue
            try:
                yield Sample(trajectory_from_json(doc["tau"]), doc["zeta"], doc["rho"])
            except (KeyError, TypeError, InputError) as exc:
                raise InputError(f"{path}:{lineno}: bad sample ({exc})") from exc


def load_dataset(path):
    """Eager load: returns (samples, header)."""
    it = iter_dataset(path)
    header = next(it, None)
    if header is None:
        raise InputError(f"{path}: empty dataset file")
    return list(it), header


def collect_to_dir(cfg: CollectConfig, out_dir) -> dict:
    """Collect and persist one dataset file per mode plus manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    datasets, manifest = collect(cfg)
    paths = {}
    for key, samples in datasets.items():
        path = os.path.join(out_dir, f"dataset_{key}.jsonl")
        save_dataset(path, samples, key)
        paths[key] = path
    manifest["files"] = {k: os.path.basename(p) for k, p in paths.items()}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return {"datasets": paths, "manifest": manifest}

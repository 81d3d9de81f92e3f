"""Experiment orchestration.

Runs paired trials of value-guided optimization against its plain and
single-network baselines under high/low iteration budgets, on a multi-cycle
regrasp-and-turn task, and writes deterministic machine-readable reports.
"""

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Optional

import numpy as np

from .datagen import ContactSequence, precursory_grasp
from .model import ContactMode, EnvSpec, InputError, State
from .sim import InitSampler, SimConfig, resolve_and_filter, sample_initial_state
from .solver import (
    CostWeights,
    ExecutionEnv,
    SolverConfig,
    SubTaskProblem,
    receding_horizon_execute,
)
from .util import make_rng, wrap_to_pi
from .valuefn import ValueEnsemble, load_ensemble

REPORT_SCHEMA = "diskturn-report-v1"
METHODS = ("avo", "to", "single_vf")

# (iters_first, iters_step) per sub-task kind; the low budget runs roughly
# half the iterations of the high one
BUDGETS = {
    "high": {"regrasp": (80, 25), "turn": (100, 25), "polish_iters": 4},
    "low": {"regrasp": (40, 12), "turn": (50, 12), "polish_iters": 2},
}

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.1


def sub_task_kind(mode: ContactMode) -> str:
    return "turn" if mode.n_contact == mode.n_f else "regrasp"


def angle_difference(psi_T: float, psi_g: float) -> float:
    """Magnitude of the wrapped rotation from goal to final angle, in [0, pi]."""
    return float(abs(wrap_to_pi(float(psi_T) - float(psi_g))))


@dataclass
class TaskSpec:
    """Benchmark task: n_pairs cycles of the contact sequence, each turn
    rotating the disk by turn_offset against an absolute goal schedule."""

    sequence: ContactSequence = field(default_factory=ContactSequence.default)
    n_pairs: int = 4
    turn_offset: float = -np.pi / 8

    def __post_init__(self):
        self.turn_offset = float(self.turn_offset)
        if self.n_pairs < 1:
            raise InputError("n_pairs must be >= 1")

    def goal(self, psi_start: float) -> float:
        n_turns = sum(
            1 for m, _ in self.sequence.entries if sub_task_kind(m) == "turn"
        )
        return float(psi_start + self.n_pairs * n_turns * self.turn_offset)

    def to_json(self) -> dict:
        return {
            "sequence": self.sequence.to_json(),
            "n_pairs": self.n_pairs,
            "turn_offset": self.turn_offset,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TaskSpec":
        return cls(
            sequence=ContactSequence.from_json(doc["sequence"]),
            n_pairs=doc["n_pairs"],
            turn_offset=doc["turn_offset"],
        )


@dataclass
class ExperimentConfig:
    method: str = "to"
    budget: str = "high"
    n_trials: int = 50
    base_seed: int = 0
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    ensembles: Optional[dict] = None  # mode key -> ValueEnsemble
    spec: EnvSpec = field(default_factory=EnvSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    task: TaskSpec = field(default_factory=TaskSpec)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"method must be one of {METHODS}")
        if self.budget not in BUDGETS:
            raise InputError(f"budget must be one of {tuple(BUDGETS)}")
        if self.n_trials < 1:
            raise InputError("n_trials must be >= 1")
        if self.method == "to":
            # the plain baseline is the alpha = beta = 0 special case
            self.alpha = 0.0
            self.beta = 0.0
        if self.method in ("avo", "single_vf"):
            if not self.ensembles:
                raise InputError(f"method {self.method!r} needs value ensembles")
            if self.method == "single_vf":
                self.ensembles = {
                    k: e.first_member_only() for k, e in self.ensembles.items()
                }

    def label(self) -> str:
        return f"{self.method}/{self.budget}"


@dataclass
class TrialResult:
    trial: int
    method: str
    budget: str
    angle_difference: float
    dropped: bool
    wall_times: list  # one entry per executed action, solver time only
    reports: list
    final_psi: float
    psi_goal: float
    s0_hash: str

    def __post_init__(self):
        if not 0.0 <= self.angle_difference <= np.pi + 1e-12:
            raise InputError("angle_difference outside [0, pi]")

    def row(self) -> dict:
        return {
            "trial": self.trial,
            "method": self.method,
            "budget": self.budget,
            "angle_difference": self.angle_difference,
            "dropped": int(self.dropped),
            "wall_time": float(np.mean(self.wall_times)) if self.wall_times else 0.0,
        }


# ---------------------------------------------------------------------------
# trial construction
# ---------------------------------------------------------------------------

# grasp optimization during trial setup is method- and budget-independent so
# every method starts a trial from the identical state
GRASP_SOLVER = SolverConfig(iters_first=80, iters_step=25, seed=0)


def state_hash(state: State) -> str:
    return hashlib.sha256(state.flat().tobytes()).hexdigest()[:16]


def trial_initial_state(
    spec: EnvSpec, sim: SimConfig, base_seed: int, trial: int, max_attempts: int = 50
):
    """Sample, resolve and grasp until a stable start state is found."""
    sampler = InitSampler(spec)
    for attempt in range(max_attempts):
        rng = make_rng(base_seed, trial, attempt)
        cand = sample_initial_state(sampler, rng)
        state = resolve_and_filter(spec, sim, cand)
        if state is None:
            continue
        grasped = precursory_grasp(spec, state, GRASP_SOLVER, sim, rng=rng)
        if grasped is not None:
            return grasped, attempt
    raise InputError(f"trial {trial}: no stable start state in {max_attempts} attempts")


def build_problems(cfg: ExperimentConfig, s_start: State) -> tuple:
    """Sub-task templates plus matching per-sub-task solver configs.

    Turn goals follow an absolute schedule fixed at task start so per-cycle
    deficits must be made up later instead of silently accumulating.
    """
    schedule = BUDGETS[cfg.budget]
    problems, configs = [], []
    turns_seen = 0
    for _ in range(cfg.task.n_pairs):
        for mode, horizon in cfg.task.sequence.entries:
            kind = sub_task_kind(mode)
            if kind == "turn":
                turns_seen += 1
                psi_g = s_start.psi + turns_seen * cfg.task.turn_offset
                goal_offset = None
            else:
                psi_g = None
                goal_offset = 0.0
            ens = cfg.ensembles.get(mode.key()) if cfg.ensembles else None
            weights = replace(cfg.weights, alpha=cfg.alpha, beta=cfg.beta)
            problems.append(
                SubTaskProblem(
                    spec=cfg.spec,
                    mode=mode,
                    horizon=horizon,
                    s0=None,
                    psi_g=psi_g,
                    weights=weights,
                    value_fn=ens if cfg.method != "to" else None,
                    goal_offset=goal_offset,
                )
            )
            first, step = schedule[kind]
            configs.append(
                replace(
                    cfg.solver,
                    iters_first=first,
                    iters_step=step,
                    polish_iters=schedule["polish_iters"],
                )
            )
    return problems, configs


def run_trial(cfg: ExperimentConfig, trial: int, s_start: State) -> TrialResult:
    problems, configs = build_problems(cfg, s_start)
    env = ExecutionEnv(
        spec=cfg.spec,
        sim_config=cfg.sim,
        state=s_start.copy(),
        rng=make_rng(cfg.base_seed, trial, 997),
    )
    result = receding_horizon_execute(env, problems, configs)
    goal = cfg.task.goal(s_start.psi)
    walls = [rep["wall_time"] for reps in result.reports for rep in reps]
    return TrialResult(
        trial=trial,
        method=cfg.method,
        budget=cfg.budget,
        angle_difference=angle_difference(result.final_state.psi, goal),
        dropped=result.dropped,
        wall_times=walls,
        reports=[
            [
                {k: rep[k] for k in ("final_cost", "max_violation", "infeasible")}
                for rep in reps
            ]
            for reps in result.reports
        ],
        final_psi=result.final_state.psi,
        psi_goal=goal,
        s0_hash=state_hash(s_start),
    )


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _summary(trials: list) -> dict:
    angles = [t.angle_difference for t in trials]
    walls = [w for t in trials for w in t.wall_times]
    return {
        "median_angle_difference": float(np.median(angles)),
        "drop_rate": float(np.mean([t.dropped for t in trials])),
        "mean_wall_time_per_action": float(np.mean(walls)),
        "n_trials": len(trials),
    }


class _TrialWorker:
    """Picklable (entry, trial) runner; states are passed in explicitly."""

    def __init__(self, configs: list, states: list):
        self.configs = configs
        self.states = states

    def __call__(self, job: tuple) -> tuple:
        e, k = job
        return e, k, run_trial(self.configs[e], k, self.states[k])


def run_experiment(configs, workers: int = 1) -> dict:
    """Paired trials over one or more method/budget configurations.

    Every configuration must share (base_seed, n_trials, spec, sim, task) so
    trial k starts from the identical precursory-grasped state everywhere.
    """
    if isinstance(configs, ExperimentConfig):
        configs = [configs]
    if not configs:
        raise InputError("no experiment configurations")
    head = configs[0]
    for c in configs[1:]:
        shared = (
            c.base_seed == head.base_seed
            and c.n_trials == head.n_trials
            and c.spec.to_json() == head.spec.to_json()
            and c.sim.to_json() == head.sim.to_json()
            and c.task.to_json() == head.task.to_json()
        )
        if not shared:
            raise InputError("paired configurations must share seed, trials, env, task")
    labels = [c.label() for c in configs]
    if len(set(labels)) != len(labels):
        raise InputError(f"duplicate method/budget entries: {labels}")

    t0 = time.perf_counter()
    states, setup = [], []
    for k in range(head.n_trials):
        s, attempts = trial_initial_state(head.spec, head.sim, head.base_seed, k)
        states.append(s)
        setup.append({"trial": k, "attempts": attempts + 1, "s0_hash": state_hash(s)})

    jobs = [(e, k) for e in range(len(configs)) for k in range(head.n_trials)]
    worker = _TrialWorker(configs, states)
    if workers > 1:
        with Pool(workers) as pool:
            done = pool.map(worker, jobs)
    else:
        done = [worker(j) for j in jobs]
    per_entry = [[None] * head.n_trials for _ in configs]
    for e, k, res in done:
        per_entry[e][k] = res

    entries = []
    for cfg, trials in zip(configs, per_entry):
        entries.append(
            {
                "method": cfg.method,
                "budget": cfg.budget,
                "alpha": cfg.alpha,
                "beta": cfg.beta,
                "summary": _summary(trials),
                "trials": [
                    {
                        **t.row(),
                        "final_psi": t.final_psi,
                        "psi_goal": t.psi_goal,
                        "s0_hash": t.s0_hash,
                        "reports": t.reports,
                    }
                    for t in trials
                ],
            }
        )
    return {
        "schema": REPORT_SCHEMA,
        "base_seed": head.base_seed,
        "n_trials": head.n_trials,
        "task": head.task.to_json(),
        "trial_setup": setup,
        "entries": entries,
        "wall_time_total": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_WALL_KEYS = ("wall_time", "wall_time_total", "mean_wall_time_per_action")


def strip_wall_times(doc):
    """Deterministic core of a report: timing fields removed recursively."""
    if isinstance(doc, dict):
        return {k: strip_wall_times(v) for k, v in doc.items() if k not in _WALL_KEYS}
    if isinstance(doc, list):
        return [strip_wall_times(v) for v in doc]
    return doc


def emit_report(report: dict, out_dir) -> dict:
    """Write summary JSON, per-trial CSV, boxplot CSV, and the seed-stable
    results file. Byte-deterministic given the report."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "summary": os.path.join(out_dir, "summary.json"),
        "trials": os.path.join(out_dir, "trials.csv"),
        "boxplot": os.path.join(out_dir, "boxplot.csv"),
        "results": os.path.join(out_dir, "results.json"),
    }
    summary = {
        "schema": report["schema"],
        "base_seed": report["base_seed"],
        "n_trials": report["n_trials"],
        "task": report["task"],
        "methods": {
            f'{e["method"]}/{e["budget"]}': dict(e["summary"], alpha=e["alpha"], beta=e["beta"])
            for e in report["entries"]
        },
    }
    with open(paths["summary"], "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["trials"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["trial", "method", "budget", "angle_difference", "dropped", "wall_time"]
        )
        for e in report["entries"]:
            for t in e["trials"]:
                wall = t.get("wall_time")  # absent when re-emitted from the
                writer.writerow(          # wall-time-stripped results file
                    [
                        t["trial"],
                        t["method"],
                        t["budget"],
                        repr(t["angle_difference"]),
                        t["dropped"],
                        "" if wall is None else repr(wall),
                    ]
                )
    with open(paths["boxplot"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "budget", "angle_difference"])
        for e in report["entries"]:
            for t in e["trials"]:
                writer.writerow([t["method"], t["budget"], repr(t["angle_difference"])])
    with open(paths["results"], "w") as fh:
        json.dump(strip_wall_times(report), fh, sort_keys=True)
        fh.write("\n")
    return paths


# ---------------------------------------------------------------------------
# finite-difference audit
# ---------------------------------------------------------------------------

_FD_EPS = 1e-6


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / scale))


def _random_problem(rng, mode: ContactMode, horizon: int, with_value: bool):
    from .sim import default_grasp_state
    from .valuefn import MLP, NetSpec

    spec = EnvSpec()
    s0 = default_grasp_state(spec, psi=float(rng.uniform(-np.pi, np.pi)))
    s0 = State(s0.q + rng.normal(0, 0.02, s0.q.shape), s0.psi)
    ens = None
    zeta = None
    weights = CostWeights(alpha=0.0, beta=0.0)
    if with_value:
        d = spec.n_f * spec.joints_per_finger + 3
        if sub_task_kind(mode) == "turn":
            d += 2
            zeta = s0.psi
        members = []
        for _ in range(2):
            w2 = rng.normal(0, 0.4, 8)
            # keep outputs strictly inside the clip interval so the value
            # gradient has no kink anywhere finite differences will probe
            w2 *= 2.0 / max(2.0, float(np.abs(w2).sum()))
            members.append(
                MLP(rng.normal(0, 0.4, (8, d)), rng.normal(0, 0.4, 8), w2, 2.5)
            )
        ens = ValueEnsemble(
            NetSpec(d, 8), members, np.zeros(d), np.ones(d),
            zeta_spec="sincos_angle" if zeta is not None else "none",
        )
        weights = CostWeights(alpha=0.7, beta=0.4)
    problem = SubTaskProblem(
        spec=spec,
        mode=mode,
        horizon=horizon,
        s0=s0,
        psi_g=s0.psi + float(rng.uniform(-0.3, 0.3)),
        weights=weights,
        value_fn=ens,
        zeta=zeta,
    )
    return problem


def _random_z(problem, rng):
    from .model import VarLayout

    lay = VarLayout(problem.spec, problem.mode, problem.horizon)
    lo, hi = lay.bounds()
    base = np.clip(rng.normal(0, 0.15, lay.dim), lo, hi)
    return lay, base


def gradcheck(n: int = 100, tol: float = 1e-5, seed: int = 0) -> dict:
    """Central finite-difference audit of every residual family, every cost
    term, and the network input gradient; n random instances per suite."""
    from .model import stack_constraints
    from .solver import total_cost
    from .valuefn import MLP, NetSpec, forward, input_grad

    rng = make_rng(seed)
    t0 = time.perf_counter()
    families = ("contact", "kinematics", "balance", "friction", "regrasp")
    fam_of = {
        "contact": "contact",
        "kinematics": "kinematics",
        "freeze": "kinematics",
        "balance": "balance",
        "consistency": "kinematics",
        "friction": "friction",
        "terminal_contact": "regrasp",
        "clearance": "regrasp",
    }
    worst = {f: 0.0 for f in families}
    counts = {f: 0 for f in families}
    # mode (1,0,0) alone produces rows of all five families; the others vary
    # the structure (all-stick has no regrasp rows, all-free no contact rows)
    mode_cycle = [ContactMode((1, 0, 0))] * n + [ContactMode((1, 1, 1))] * (n // 4) + [
        ContactMode((0, 0, 0))
    ] * (n // 4)
    for mode in mode_cycle:
        problem = _random_problem(rng, mode, horizon=2, with_value=False)
        lay, z = _random_z(problem, rng)

        def stacked(zv):
            traj = lay.unpack(zv, problem.s0)
            st = stack_constraints(problem.spec, problem.mode, traj)
            return st, np.concatenate([st.h, st.g])

        st0, r0 = stacked(z)
        J_analytic = np.vstack([st0.Jh, st0.Jg]) if st0.Jh.size or st0.Jg.size else None
        J_fd = np.zeros((r0.size, z.size))
        for j in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[j] += _FD_EPS
            zm[j] -= _FD_EPS
            J_fd[:, j] = (stacked(zp)[1] - stacked(zm)[1]) / (2 * _FD_EPS)
        labels = [lb.split("[")[0] for lb in list(st0.h_labels) + list(st0.g_labels)]
        for fam in families:
            rows = [i for i, lb in enumerate(labels) if fam_of.get(lb) == fam]
            if rows:
                worst[fam] = max(worst[fam], _rel_err(J_analytic[rows], J_fd[rows]))
                counts[fam] += 1

    suites = {
        f: {"instances": counts[f], "max_rel_err": worst[f]} for f in families
    }

    for name, with_value in (("cost_goal", False), ("cost_smooth", False), ("cost_value", True)):
        worst_c = 0.0
        for i in range(n):
            mode = ContactMode((1, 1, 1)) if i % 2 == 0 else ContactMode((1, 0, 0))
            problem = _random_problem(rng, mode, horizon=2, with_value=with_value)
            if name == "cost_goal":
                problem = replace(problem, weights=CostWeights(w_smooth_q=0.0, w_smooth_f=0.0))
            elif name == "cost_smooth":
                problem = replace(problem, weights=CostWeights(w_goal=0.0))
            else:
                problem = replace(
                    problem,
                    weights=CostWeights(
                        w_goal=0.0, w_smooth_q=0.0, w_smooth_f=0.0, alpha=0.7, beta=0.4
                    ),
                )
            lay, z = _random_z(problem, rng)

            def cost(zv):
                return total_cost(problem, lay.unpack(zv, problem.s0))[0]

            _, grad = total_cost(problem, lay.unpack(z, problem.s0))
            g_fd = np.zeros(z.size)
            for j in range(z.size):
                zp, zm = z.copy(), z.copy()
                zp[j] += _FD_EPS
                zm[j] -= _FD_EPS
                g_fd[j] = (cost(zp) - cost(zm)) / (2 * _FD_EPS)
            worst_c = max(worst_c, _rel_err(grad, g_fd))
        suites[name] = {"instances": n, "max_rel_err": worst_c}

    worst_m = 0.0
    for _ in range(n):
        d = int(rng.integers(3, 12))
        hid = int(rng.integers(4, 24))
        member = MLP(
            rng.normal(0, 0.5, (hid, d)),
            rng.normal(0, 0.5, hid),
            rng.normal(0, 0.5, hid),
            float(rng.normal()),
        )
        x = rng.normal(0, 1.0, d)
        g = input_grad(member, x)
        g_fd = np.zeros(d)
        for j in range(d):
            xp, xm = x.copy(), x.copy()
            xp[j] += _FD_EPS
            xm[j] -= _FD_EPS
            g_fd[j] = (forward(member, xp) - forward(member, xm)) / (2 * _FD_EPS)
        worst_m = max(worst_m, _rel_err(g, g_fd))
    suites["mlp_input_grad"] = {"instances": n, "max_rel_err": worst_m}

    for doc in suites.values():
        doc["tol"] = tol
        doc["pass"] = bool(doc["max_rel_err"] <= tol and doc["instances"] >= n)
    return {
        "suites": suites,
        "runtime": time.perf_counter() - t0,
        "pass": all(doc["pass"] for doc in suites.values()),
    }


def load_ensembles(dir_path, keys) -> dict:
    """Load ensemble_<mode>.json per required mode key."""
    out = {}
    for key in keys:
        path = os.path.join(dir_path, f"ensemble_{key}.json")
        if not os.path.exists(path):
            raise InputError(f"missing ensemble for mode {key}: {path}")
        ens = load_ensemble(path)
        if not isinstance(ens, ValueEnsemble):
            raise InputError(f"{path}: not an ensemble file")
        out[key] = ens
    return out

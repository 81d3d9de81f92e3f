"""Costs, sub-task problems, the particle trajectory optimizer, and the
receding-horizon executor.

The optimizer keeps P trajectory particles. Each iteration every particle
takes an Adam step on the augmented Lagrangian of its own costs/constraints
plus an RBF-kernel repulsion that keeps particles spread out; box bounds are
enforced by projection. Equality multipliers and the penalty weight follow a
fixed update schedule, so runs are bit-reproducible for a given seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .model import (
    ContactMode,
    Control,
    EnvSpec,
    InputError,
    State,
    Trajectory,
    VarLayout,
    eval_blocks,
    stack_constraints,
)
from .sim import SimConfig, detect_drop, step as sim_step
from .util import make_rng
from .valuefn import value_term


class SolverError(RuntimeError):
    """Raised when every particle has collapsed to non-finite values."""


@dataclass
class CostWeights:
    w_goal: float = 1.0
    w_smooth_q: float = 0.5
    w_smooth_f: float = 0.01
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        vals = (self.w_goal, self.w_smooth_q, self.w_smooth_f, self.alpha, self.beta)
        if any(v < 0 for v in vals):
            raise InputError("cost weights must be nonnegative")

    def to_json(self) -> dict:
        return {
            "w_goal": self.w_goal,
            "w_smooth_q": self.w_smooth_q,
            "w_smooth_f": self.w_smooth_f,
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CostWeights":
        return cls(**doc)


@dataclass
class SolverConfig:
    particles: int = 8
    iters_first: int = 100
    iters_step: int = 25
    step_size: float = 0.05
    penalty_init: float = 10.0
    penalty_growth: float = 1.5
    kernel_bandwidth: object = "median"
    constraint_tol: float = 1e-3
    seed: int = 0
    repulsion_weight: float = 0.03
    multiplier_interval: int = 10
    init_jitter: float = 0.05
    penalty_max: float = 1e4
    step_decay: float = 0.05
    polish_iters: int = 4
    # Optional Newton-style endgame on the selected particle.  Off by default:
    # solution quality must stay a function of the iteration budget, since the
    # budget comparison is the point of the downstream experiments.
    descent_steps: int = 0

    def __post_init__(self):
        if self.particles < 1 or self.iters_first < 1 or self.iters_step < 1:
            raise InputError("particles and iteration budgets must be >= 1")
        if self.penalty_growth < 1.0:
            raise InputError("penalty_growth must be >= 1")

    def to_json(self) -> dict:
        return {
            "particles": self.particles,
            "iters_first": self.iters_first,
            "iters_step": self.iters_step,
            "step_size": self.step_size,
            "penalty_init": self.penalty_init,
            "penalty_growth": self.penalty_growth,
            "kernel_bandwidth": self.kernel_bandwidth,
            "constraint_tol": self.constraint_tol,
            "seed": self.seed,
            "repulsion_weight": self.repulsion_weight,
            "multiplier_interval": self.multiplier_interval,
            "init_jitter": self.init_jitter,
            "penalty_max": self.penalty_max,
            "step_decay": self.step_decay,
            "polish_iters": self.polish_iters,
            "descent_steps": self.descent_steps,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SolverConfig":
        return cls(**doc)


@dataclass
class SubTaskProblem:
    """One fixed-mode trajectory optimization problem.

    psi_g may be left unbound (None) with goal_offset set instead; the
    receding-horizon executor binds psi_g = s_0.psi + goal_offset once when
    the sub-task starts. t_offset/nominal_horizon keep the value function's
    time feature consistent across shrinking-horizon re-solves.
    """

    spec: EnvSpec
    mode: ContactMode
    horizon: int
    s0: State
    psi_g: Optional[float]
    weights: CostWeights
    value_fn: object = None
    zeta: Optional[float] = None
    goal_offset: Optional[float] = None
    t_offset: int = 0
    nominal_horizon: Optional[int] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise InputError("horizon must be >= 1")
        if self.nominal_horizon is None:
            self.nominal_horizon = self.t_offset + self.horizon
        uses_value = self.weights.alpha > 0 or self.weights.beta > 0
        if uses_value and self.value_fn is None:
            raise InputError("alpha/beta > 0 requires an ensemble")
        # an attached ensemble with alpha = beta = 0 is allowed and ignored:
        # the baseline must match bit for bit whether or not one is present
        if self.psi_g is None and self.goal_offset is None:
            raise InputError("need psi_g or goal_offset")


# ---------------------------------------------------------------------------
# batched costs
# ---------------------------------------------------------------------------


def _goal_weights(H: int) -> np.ndarray:
    w = np.ones(H)
    w[-1] = 10.0
    return w


def _vf_features(problem: SubTaskProblem, q, psi):
    """Raw value-net feature rows for states t=1..H of every particle.

    q: (P, H, n_f, J); psi: (P, H); returns (P*H, d). Time indices are
    absolute within the sub-task (t_offset shifts them) over the nominal
    horizon. The matrix is cached per problem and particle count: the time
    and zeta columns are fixed at first use, each call rewrites only q and
    sin/cos psi, and rows stay valid until the next call for this problem.
    """
    P, H = psi.shape
    nq = q.shape[2] * q.shape[3]
    cache = getattr(problem, "_vf_xcache", None)
    if cache is None:
        cache = {}
        object.__setattr__(problem, "_vf_xcache", cache)
    X = cache.get(P)
    if X is None:
        d = nq + 3
        with_zeta = (
            problem.value_fn is not None
            and problem.value_fn.zeta_spec != "none"
        )
        if with_zeta:
            if problem.zeta is None:
                raise InputError("ensemble expects zeta but none is bound")
            d += 2
        X = np.empty((P * H, d))
        t_abs = (
            problem.t_offset + np.arange(1, H + 1)
        ) / problem.nominal_horizon
        X[:, nq + 2] = np.broadcast_to(t_abs, (P, H)).reshape(-1)
        if with_zeta:
            X[:, nq + 3] = np.sin(problem.zeta)
            X[:, nq + 4] = np.cos(problem.zeta)
        cache[P] = X
    X[:, :nq] = q.reshape(P * H, nq)
    psi_flat = psi.reshape(-1)
    np.sin(psi_flat, out=X[:, nq])
    np.cos(psi_flat, out=X[:, nq + 1])
    return X


def _costs_batched(problem: SubTaskProblem, arrs, need_grad=True):
    """Total cost J per particle plus gradients w.r.t. trajectory arrays.

    Returns (J (P,), grads dict with G_psi (P,H), G_q (P,H,n_f,J),
    G_dq, G_f, G_tau) where state grads cover t=1..H only.
    """
    w = problem.weights
    psi = arrs["psi"][:, 1:]
    q = arrs["q"][:, 1:]
    dq, f, tau = arrs["dq"], arrs["f"], arrs["tau"]
    P, H = psi.shape

    gw = _goal_weights(H)
    err = psi - problem.psi_g
    J = w.w_goal * (gw * err**2).sum(axis=1)
    G_psi = 2.0 * w.w_goal * gw * err if need_grad else None

    J = J + w.w_smooth_q * (dq**2).sum(axis=(1, 2, 3))
    G_dq = 2.0 * w.w_smooth_q * dq if need_grad else None

    fd = np.diff(f, axis=1, prepend=np.zeros_like(f[:, :1]))
    J = J + w.w_smooth_f * (fd**2).sum(axis=(1, 2, 3))
    if need_grad:
        G_f = 2.0 * w.w_smooth_f * (
            fd - np.concatenate([fd[:, 1:], np.zeros_like(fd[:, :1])], axis=1)
        )
    else:
        G_f = None
    G_tau = np.zeros_like(tau) if need_grad else None
    G_q = np.zeros_like(q) if need_grad else None

    if w.alpha > 0 or w.beta > 0:
        X = _vf_features(problem, q, psi)
        jrows, gx = value_term(
            problem.value_fn, X, w.alpha, w.beta, with_grad=need_grad
        )
        J = J + jrows.reshape(P, H).sum(axis=1)
        if need_grad:
            nq = q.shape[2] * q.shape[3]
            G_q = G_q + gx[:, :nq].reshape(q.shape)
            # psi enters the features as (sin psi, cos psi), already held in
            # columns nq and nq + 1 of X.
            gpsi = gx[:, nq] * X[:, nq + 1] - gx[:, nq + 1] * X[:, nq]
            G_psi = G_psi + gpsi.reshape(P, H)

    if not need_grad:
        return J, None
    return J, {"psi": G_psi, "q": G_q, "dq": G_dq, "f": G_f, "tau": G_tau}


def _pack_grad(lay: VarLayout, grads) -> np.ndarray:
    """Assemble per-array gradients into flat decision-vector gradients."""
    P = grads["psi"].shape[0]
    G = np.zeros((P, lay.dim))
    sb = G[:, : lay.ctrl0].reshape(P, lay.H, lay.ds)
    cb = G[:, lay.ctrl0 :].reshape(P, lay.H, lay.dc)
    sb[:, :, : lay.nq] += grads["q"].reshape(P, lay.H, lay.nq)
    sb[:, :, lay.nq] += grads["psi"]
    cb[:, :, : lay.nq] += grads["dq"].reshape(P, lay.H, lay.nq)
    if lay.n_c:
        cb[:, :, lay.nq : lay.nq + 2 * lay.n_c] += grads["f"].reshape(
            P, lay.H, 2 * lay.n_c
        )
    cb[:, :, -1] += grads["tau"]
    return G


def _traj_problem_layout(problem: SubTaskProblem, trajectory: Trajectory):
    if trajectory.horizon != problem.horizon:
        raise InputError("trajectory horizon does not match problem")
    lay = VarLayout(problem.spec, problem.mode, problem.horizon)
    z = lay.pack(trajectory)
    arrs = lay.arrays(z[None], trajectory.states[0])
    return lay, arrs


def cost_goal(problem: SubTaskProblem, trajectory: Trajectory):
    """Weighted squared goal error over the horizon (terminal weight 10).

    Returns the scalar and its gradient in VarLayout order.
    """
    lay, arrs = _traj_problem_layout(problem, trajectory)
    psi_g = problem.psi_g
    if psi_g is None:
        psi_g = trajectory.states[0].psi + problem.goal_offset
    only_goal = replace(problem, psi_g=psi_g,
                        weights=CostWeights(problem.weights.w_goal, 0, 0),
                        value_fn=None)
    J, grads = _costs_batched(only_goal, arrs)
    return float(J[0]), _pack_grad(lay, grads)[0]


def cost_smooth(problem: SubTaskProblem, trajectory: Trajectory):
    """Squared joint deltas plus squared force differences (first step
    referenced to zero force)."""
    lay, arrs = _traj_problem_layout(problem, trajectory)
    w = problem.weights
    only_smooth = replace(
        problem, psi_g=0.0,
        weights=CostWeights(0.0, w.w_smooth_q, w.w_smooth_f), value_fn=None,
    )
    J, grads = _costs_batched(only_smooth, arrs)
    return float(J[0]), _pack_grad(lay, grads)[0]


def cost_value(problem: SubTaskProblem, trajectory: Trajectory):
    """alpha * mu + beta * sigma2 over the ensemble, with exact input
    gradients backpropagated through every member."""
    if problem.weights.alpha == 0 and problem.weights.beta == 0:
        lay = VarLayout(problem.spec, problem.mode, problem.horizon)
        return 0.0, np.zeros(lay.dim)
    if problem.value_fn is None:
        raise InputError("cost_value requires an ensemble")
    lay, arrs = _traj_problem_layout(problem, trajectory)
    only_value = replace(problem, weights=CostWeights(
        0.0, 0.0, 0.0, problem.weights.alpha, problem.weights.beta),
        psi_g=0.0)
    J, grads = _costs_batched(only_value, arrs)
    return float(J[0]), _pack_grad(lay, grads)[0]


def total_cost(problem: SubTaskProblem, trajectory: Trajectory):
    """Goal + smoothness + value cost with gradient in VarLayout order."""
    lay, arrs = _traj_problem_layout(problem, trajectory)
    bound = problem
    if bound.psi_g is None:
        bound = replace(problem, psi_g=trajectory.states[0].psi + problem.goal_offset)
    J, grads = _costs_batched(bound, arrs)
    return float(J[0]), _pack_grad(lay, grads)[0]


# ---------------------------------------------------------------------------
# constraint weights -> gradient contraction
# ---------------------------------------------------------------------------


def _constraint_arrays(blocks, mode: ContactMode):
    """Equality and inequality residual families in a fixed order."""
    eq = {}
    if mode.n_contact:
        eq["contact"] = blocks["contact"]
        eq["kin"] = blocks["kin"]
    else:
        eq["freeze"] = blocks["psi_freeze"]
    eq["balance"] = blocks["balance"]
    if mode.regrasp_indices:
        eq["terminal"] = blocks["terminal"]
    eq["cons"] = blocks["cons"]
    ineq = {}
    if mode.n_contact:
        ineq["friction"] = blocks["friction"]
    if mode.regrasp_indices and blocks["clearance"].shape[1] > 0:
        ineq["clearance"] = blocks["clearance"]
    return eq, ineq


def _contract_constraints(lay: VarLayout, mode: ContactMode, blocks, w_eq, w_ineq):
    """Accumulate sum_rows w_row * d(row)/d(z) into per-array gradients.

    w_eq/w_ineq hold one weight array per residual family, shaped like the
    residuals themselves.
    """
    spec = lay.spec
    P = next(iter(w_eq.values())).shape[0]
    H, n_f, J = lay.H, spec.n_f, lay.J
    con = list(mode.contact_indices)
    reg = list(mode.regrasp_indices)
    G_q_full = np.zeros((P, H + 1, n_f, J))
    G_psi_full = np.zeros((P, H + 1))
    G_dq = np.zeros((P, H, n_f, J))
    G_f = np.zeros((P, H, lay.n_c, 2))
    G_tau = np.zeros((P, H))

    if con:
        w = w_eq["contact"]  # (P, H, n_c)
        G_q_full[:, 1:, con] += np.einsum("phc,phcj->phcj", w, blocks["contact_jq"])
        w = w_eq["kin"]  # (P, H, n_c, 2)
        G_q_full[:, 1:, con] += np.einsum("phcx,phcxj->phcj", w, blocks["kin_jq_next"])
        G_q_full[:, :-1, con] += np.einsum("phcx,phcxj->phcj", w, blocks["kin_jq_cur"])
        G_psi_full[:, 1:] += np.einsum("phcx,phcx->ph", w, blocks["kin_jpsi_next"])
        G_psi_full[:, :-1] += np.einsum("phcx,phcx->ph", w, blocks["kin_jpsi_cur"])
    else:
        w = w_eq["freeze"]  # (P, H)
        G_psi_full[:, 1:] += w
        G_psi_full[:, :-1] -= w

    w = w_eq["balance"]  # (P, H)
    if lay.n_c:
        G_f[:, :, :, 1] += spec.disk_radius * w[:, :, None]
    G_tau += w

    if reg:
        w = w_eq["terminal"]  # (P, n_r)
        G_q_full[:, H, reg] += np.einsum("pc,pcj->pcj", w, blocks["terminal_jq"])

    w = w_eq["cons"]  # (P, H, n_f, J)
    G_q_full[:, :-1] += w
    G_q_full[:, 1:] -= w
    G_dq += w

    if "friction" in w_ineq:
        w = w_ineq["friction"]  # (P, H, n_c, 3)
        G_f[:, :, :, 0] += -w[..., 0] - spec.mu * (w[..., 1] + w[..., 2])
        G_f[:, :, :, 1] += w[..., 1] - w[..., 2]
    if "clearance" in w_ineq:
        w = w_ineq["clearance"]  # (P, H-1, n_r)
        G_q_full[:, 1:H, reg] += np.einsum("phc,phcj->phcj", w, blocks["clearance_jq"])

    return {
        "psi": G_psi_full[:, 1:],
        "q": G_q_full[:, 1:],
        "dq": G_dq,
        "f": G_f,
        "tau": G_tau,
    }


def _violations(eq, ineq):
    """(max norm, l1 norm) of constraint violation per particle."""
    P = next(iter(eq.values())).shape[0]
    vmax = np.zeros(P)
    l1 = np.zeros(P)
    for arr in eq.values():
        flat = np.abs(arr.reshape(P, -1))
        if flat.shape[1]:
            vmax = np.maximum(vmax, flat.max(axis=1))
            l1 += flat.sum(axis=1)
    for arr in ineq.values():
        flat = np.maximum(arr.reshape(P, -1), 0.0)
        if flat.shape[1]:
            vmax = np.maximum(vmax, flat.max(axis=1))
            l1 += flat.sum(axis=1)
    return vmax, l1


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _default_init(problem: SubTaskProblem, lay: VarLayout) -> np.ndarray:
    """Hold-still initialization: states pinned at s_0, zero controls."""
    z = np.zeros(lay.dim)
    for t in range(1, lay.H + 1):
        z[lay.col_q(t)] = problem.s0.q.ravel()
        z[lay.col_psi(t)] = problem.s0.psi
    return z


def _gn_polish(problem, lay, lo, hi, z, steps):
    """Project one particle onto the constraint set with damped Gauss-Newton.

    Solves (J J^T + lam I) y = r over the equality rows plus the violated
    non-box inequality rows, then steps z <- clip(z - J^T y, lo, hi); box
    rows are enforced by the clip itself. The first-order phase gets within
    ~1e-2 of the manifold, and these steps contract the residual roughly
    quadratically without deliberately moving along the manifold, so the
    cost is left essentially untouched. The damping is adapted the usual
    Levenberg-Marquardt way: J J^T turns near-singular when a finger
    approaches a straightened-elbow configuration, and an undamped step
    then explodes along the near-null direction.
    """
    spec, mode, s0 = problem.spec, problem.mode, problem.s0

    def viol(zc):
        arrs = lay.arrays(zc[None, :], s0)
        blocks = eval_blocks(spec, mode, arrs, with_jac=False)
        eq, ineq = _constraint_arrays(blocks, mode)
        vmax, l1 = _violations(eq, ineq)
        return float(vmax[0]), float(l1[0])

    vmax, cur = viol(z)
    damp = 1e-8
    for _ in range(steps):
        if vmax <= 1e-11:
            break
        st = stack_constraints(spec, mode, lay.unpack(z, s0))
        nonbox = np.array([not lb.startswith("box") for lb in st.g_labels], bool)
        act = nonbox & (st.g > 0.0)
        r = np.concatenate([st.h, st.g[act]])
        Jm = np.vstack([st.Jh, st.Jg[act]]) if act.any() else st.Jh
        A0 = Jm @ Jm.T
        scale = max(float(np.trace(A0)) / A0.shape[0], 1e-12)
        improved = False
        for _ in range(8):
            A = A0.copy()
            A[np.diag_indices_from(A)] += damp * scale
            try:
                dz = -Jm.T @ np.linalg.solve(A, r)
            except np.linalg.LinAlgError:
                damp *= 10.0
                continue
            step = 1.0
            for _ in range(3):
                z_try = np.clip(z + step * dz, lo, hi)
                v_try, l_try = viol(z_try)
                if l_try < cur:
                    z, vmax, cur, improved = z_try, v_try, l_try, True
                    break
                step *= 0.5
            if improved:
                damp = max(damp / 10.0, 1e-8)
                break
            damp *= 10.0
        if not improved:
            break
    return z


def _cost_hessian_diag(problem: SubTaskProblem, lay: VarLayout) -> np.ndarray:
    """Diagonal of the Hessian of the quadratic cost terms in layout order.

    Goal: 2 w_goal w_t on each psi_t. Joint smoothness: 2 w_smooth_q on dq.
    Force smoothness couples consecutive steps; only its diagonal is used
    (4 w_smooth_f interior, 2 w_smooth_f at the last step). The value term
    contributes nothing here; the caller floors flat directions.
    """
    w = problem.weights
    h = np.zeros(lay.dim)
    gw = _goal_weights(lay.H)
    for t in range(1, lay.H + 1):
        h[lay.col_psi(t)] = 2.0 * w.w_goal * gw[t - 1]
        h[lay.col_dq(t - 1)] = 2.0 * w.w_smooth_q
        if lay.n_c:
            h[lay.col_f(t - 1)] = (4.0 if t < lay.H else 2.0) * w.w_smooth_f
    return h


def _tangent_descent(problem, lay, lo, hi, z, steps, config):
    """Descend the cost along the constraint tangent space, re-projecting.

    Classical gradient projection: the cost gradient is projected onto the
    null space of the active constraint Jacobian, a line search moves along
    it, and a short Gauss-Newton projection restores feasibility after each
    trial. This is the endgame the first-order phase lacks; without it the
    returned particle is feasible but sits noticeably above the constrained
    local minimum. Accepted steps must not worsen the violation beyond the
    incumbent's level.
    """
    spec, mode, s0 = problem.spec, problem.mode, problem.s0

    def cost_of(zc):
        arrs = lay.arrays(zc[None, :], s0)
        J, _ = _costs_batched(problem, arrs, need_grad=False)
        return float(J[0])

    def viol_of(zc):
        arrs = lay.arrays(zc[None, :], s0)
        blocks = eval_blocks(spec, mode, arrs, with_jac=False)
        eq, ineq = _constraint_arrays(blocks, mode)
        vmax, _ = _violations(eq, ineq)
        return float(vmax[0])

    # inverse diagonal of the cost's quadratic part; the floor keeps the
    # flat directions (q, tau, value-term coords) from blowing up the step
    hdiag = _cost_hessian_diag(problem, lay)
    floor = 0.05 * max(float(hdiag.max()), 1.0)
    Winv = 1.0 / np.maximum(hdiag, floor)

    def newton_dir(A, G):
        WG = Winv * G
        M = (A * Winv) @ A.T
        M[np.diag_indices_from(M)] += 1e-10 * max(np.trace(M) / M.shape[0], 1.0)
        y = np.linalg.solve(M, A @ WG)
        return -(WG - Winv * (A.T @ y)), y

    J_cur = cost_of(z)
    v_cur = viol_of(z)
    for _ in range(steps):
        arrs = lay.arrays(z[None, :], s0)
        _, grads = _costs_batched(problem, arrs, need_grad=True)
        G = _pack_grad(lay, grads)[0]
        st = stack_constraints(spec, mode, lay.unpack(z, s0))
        nonbox = np.array([not lb.startswith("box") for lb in st.g_labels], bool)
        act = np.where(nonbox & (st.g > -1e-7))[0]
        n_h = st.h.size
        try:
            A = np.vstack([st.Jh, st.Jg[act]]) if act.size else st.Jh
            d, y = newton_dir(A, G)
            # release active inequality rows whose multiplier estimate says
            # the step moves into the feasible side anyway
            keep = y[n_h:] > 0.0
            if act.size and not keep.all():
                A = np.vstack([st.Jh, st.Jg[act[keep]]]) if keep.any() else st.Jh
                d, _ = newton_dir(A, G)
        except np.linalg.LinAlgError:
            break
        if float(np.linalg.norm(d)) <= 1e-10:
            break
        improved = False
        eta = 1.0
        for _ in range(7):
            z_try = np.clip(z + eta * d, lo, hi)
            z_try = _gn_polish(problem, lay, lo, hi, z_try, 3)
            J_try = cost_of(z_try)
            if J_try < J_cur - 1e-14 and viol_of(z_try) <= max(v_cur, 1e-8):
                z, J_cur = z_try, J_try
                v_cur = viol_of(z)
                improved = True
                break
            eta *= 0.5
        if not improved:
            break
    return z


def solve(
    problem: SubTaskProblem,
    config: SolverConfig,
    init: Optional[Trajectory] = None,
    rng: Optional[np.random.Generator] = None,
    iters: Optional[int] = None,
):
    """Particle optimization of one sub-task; returns (best trajectory, report).

    The iteration budget defaults to iters_first for cold starts and
    iters_step when a warm-start trajectory is supplied. The report carries
    final_cost, max_violation, iterations_used, infeasible, resets and the
    solve wall time.
    """
    if problem.psi_g is None:
        problem = replace(problem, psi_g=problem.s0.psi + problem.goal_offset)
    spec, mode = problem.spec, problem.mode
    lay = VarLayout(spec, mode, problem.horizon)
    lo, hi = lay.bounds()
    lo_c = np.where(np.isfinite(lo), lo, -1e30)
    hi_c = np.where(np.isfinite(hi), hi, 1e30)
    P = config.particles
    if iters is None:
        iters = config.iters_first if init is None else config.iters_step
    if rng is None:
        rng = make_rng(config.seed)

    if init is not None:
        if init.horizon != problem.horizon:
            raise InputError("warm-start horizon does not match problem")
        z0 = lay.pack(init)
    else:
        z0 = _default_init(problem, lay)
    Z = np.tile(z0, (P, 1))
    if P > 1:
        jitter = rng.normal(0.0, config.init_jitter, size=(P - 1, lay.dim))
        Z[1:] += jitter
    Z = np.clip(Z, lo_c, hi_c)
    Z_init = Z.copy()

    t0 = time.perf_counter()
    start = problem.s0

    lam_eq = None
    lam_in = None
    penalty = config.penalty_init
    m1 = np.zeros_like(Z)
    m2 = np.zeros_like(Z)
    b1, b2 = 0.9, 0.999
    adam_t = np.zeros(P)  # per-particle step counts survive resets
    resets = 0

    best_merit = np.full(P, np.inf)
    best_J = np.full(P, np.inf)
    best_viol = np.full(P, np.inf)
    best_Z = Z.copy()
    merit_history = []

    def evaluate(Zc, need_grad):
        arrs = lay.arrays(Zc, start)
        blocks = eval_blocks(spec, mode, arrs, with_jac=need_grad)
        eq, ineq = _constraint_arrays(blocks, mode)
        J, grads = _costs_batched(problem, arrs, need_grad=need_grad)
        return arrs, blocks, eq, ineq, J, grads

    for it in range(iters + 1):
        last = it == iters
        arrs, blocks, eq, ineq, J, grads = evaluate(Z, need_grad=not last)
        vmax, l1 = _violations(eq, ineq)
        merit = J + l1
        bad = ~np.isfinite(merit)

        ok = ~bad & (merit < best_merit)
        if np.any(ok):
            best_merit[ok] = merit[ok]
            best_J[ok] = J[ok]
            best_viol[ok] = vmax[ok]
            best_Z[ok] = Z[ok]
        merit_history.append(float(best_merit.min()))

        if np.all(bad):
            raise SolverError("every particle became non-finite")
        if np.any(bad):
            resets += int(bad.sum())
            Z[bad] = Z_init[bad]
            m1[bad] = 0.0
            m2[bad] = 0.0
            adam_t[bad] = 0.0
            if lam_eq is not None:
                for a in lam_eq.values():
                    a[bad] = 0.0
                for a in lam_in.values():
                    a[bad] = 0.0
            arrs, blocks, eq, ineq, J, grads = evaluate(Z, need_grad=not last)
        if last:
            break

        if lam_eq is None:
            lam_eq = {k: np.zeros_like(v) for k, v in eq.items()}
            lam_in = {k: np.zeros_like(v) for k, v in ineq.items()}

        w_eq = {k: lam_eq[k] + penalty * v for k, v in eq.items()}
        w_in = {k: np.maximum(0.0, lam_in[k] + penalty * v) for k, v in ineq.items()}
        Gc = _contract_constraints(lay, mode, blocks, w_eq, w_in)
        for key in grads:
            grads[key] = grads[key] + Gc[key]
        G = _pack_grad(lay, grads)

        if P > 1 and config.repulsion_weight > 0:
            diff = Z[:, None, :] - Z[None, :, :]
            d2 = (diff**2).sum(axis=2)
            if config.kernel_bandwidth == "median":
                tri = d2[np.triu_indices(P, k=1)]
                med = float(np.median(tri))
                band = max(med / np.log(P + 1.0), 1e-8)
            else:
                band = float(config.kernel_bandwidth)
            K = np.exp(-d2 / band)
            rep = (2.0 / band) * np.einsum("ij,ijd->id", K, diff)
            G = G - config.repulsion_weight * rep

        finite = np.isfinite(G).all(axis=1)
        if not np.all(finite):
            resets += int((~finite).sum())
            Z[~finite] = Z_init[~finite]
            m1[~finite] = 0.0
            m2[~finite] = 0.0
            adam_t[~finite] = 0.0
            G[~finite] = 0.0

        adam_t += 1.0
        m1 = b1 * m1 + (1 - b1) * G
        m2 = b2 * m2 + (1 - b2) * G**2
        c1 = 1.0 - b1 ** adam_t[:, None]
        c2 = 1.0 - b2 ** adam_t[:, None]
        # linear step decay down to step_decay * step_size by the last iter
        frac = config.step_decay + (1.0 - config.step_decay) * (1.0 - it / iters)
        Z = np.clip(Z - config.step_size * frac * (m1 / c1) / (np.sqrt(m2 / c2) + 1e-8),
                    lo_c, hi_c)

        if (it + 1) % config.multiplier_interval == 0:
            for k in lam_eq:
                lam_eq[k] = lam_eq[k] + penalty * eq[k]
            for k in lam_in:
                lam_in[k] = np.maximum(0.0, lam_in[k] + penalty * ineq[k])
            penalty = min(penalty * config.penalty_growth, config.penalty_max)

    # Selection candidates get an endgame the first-order phase lacks: the
    # lowest-merit particle and (if different) the lowest-violation one are
    # projected onto the constraint set (Gauss-Newton) and then descend the
    # cost along the constraint tangent space. Both moves are deterministic
    # and only ever accepted when they improve the candidate.
    if config.polish_iters > 0:
        for p in sorted({int(np.argmin(best_merit)), int(np.argmin(best_viol))}):
            zp = _gn_polish(problem, lay, lo_c, hi_c, best_Z[p],
                            config.polish_iters)
            if config.descent_steps > 0:
                zp = _tangent_descent(problem, lay, lo_c, hi_c, zp,
                                      config.descent_steps, config)
            arrs_p = lay.arrays(zp[None, :], start)
            blocks_p = eval_blocks(spec, mode, arrs_p, with_jac=False)
            eq_p, in_p = _constraint_arrays(blocks_p, mode)
            vmax_p, _ = _violations(eq_p, in_p)
            J_p, _ = _costs_batched(problem, arrs_p, need_grad=False)
            better_v = float(vmax_p[0]) <= best_viol[p]
            better_j = (float(vmax_p[0]) <= config.constraint_tol
                        and float(J_p[0]) <= best_J[p])
            if better_v or better_j:
                best_Z[p] = zp
                best_J[p] = float(J_p[0])
                best_viol[p] = float(vmax_p[0])

    feasible = best_viol <= config.constraint_tol
    if np.any(feasible):
        costs = np.where(feasible, best_J, np.inf)
        sel = int(np.argmin(costs))  # argmin takes the lowest index on ties
        infeasible = False
    else:
        sel = int(np.argmin(best_viol))
        infeasible = True

    traj = lay.unpack(best_Z[sel], start)
    report = {
        "final_cost": float(best_J[sel]),
        "max_violation": float(best_viol[sel]),
        "iterations_used": iters,
        "infeasible": infeasible,
        "resets": resets,
        "merit_history": merit_history,
        "wall_time": time.perf_counter() - t0,
    }
    return traj, report


# ---------------------------------------------------------------------------
# receding-horizon execution
# ---------------------------------------------------------------------------


@dataclass
class ExecutionEnv:
    """Execution context: environment, simulator settings, current state."""

    spec: EnvSpec
    sim_config: SimConfig
    state: State
    rng: Optional[np.random.Generator] = None


@dataclass
class ExecutionResult:
    sub_trajectories: list
    reports: list
    dropped: bool
    final_state: State
    sub_goals: list = field(default_factory=list)
    sub_zetas: list = field(default_factory=list)


def _shift_warm_start(traj: Trajectory, new_start: State) -> Optional[Trajectory]:
    """Drop the consumed first step and re-anchor to the measured state."""
    if traj.horizon < 2:
        return None
    states = [new_start] + [s.copy() for s in traj.states[2:]]
    controls = [c.copy() for c in traj.controls[1:]]
    return Trajectory(states, controls, traj.mode)


def receding_horizon_execute(
    env: ExecutionEnv, problems, config
) -> ExecutionResult:
    """Execute sub-tasks in order, re-solving with a shrinking horizon.

    Each sub-task binds its goal and auxiliary input from the measured state
    at its first step, solves with iters_first, executes one control, then
    re-solves the remaining horizon with iters_step (warm-started by the
    shifted previous solution). A detected drop halts everything.

    config is either one SolverConfig shared by every sub-task or a sequence
    with one entry per sub-task (iteration budgets differ by sub-task kind).
    """
    if isinstance(config, SolverConfig):
        configs = [config] * len(problems)
    else:
        configs = list(config)
        if len(configs) != len(problems):
            raise InputError(
                f"need one config per sub-task: {len(configs)} != {len(problems)}"
            )
    results = ExecutionResult([], [], False, env.state)
    for p_idx, template in enumerate(problems):
        config = configs[p_idx]
        s_start = env.state
        psi_g = (
            template.psi_g
            if template.psi_g is not None
            else s_start.psi + template.goal_offset
        )
        zeta = template.zeta
        if (
            template.value_fn is not None
            and template.value_fn.zeta_spec != "none"
            and zeta is None
        ):
            zeta = s_start.psi
        H_nom = template.horizon
        exec_states = [s_start]
        exec_controls = []
        warm = None
        sub_reports = []
        for k in range(H_nom):
            sub = replace(
                template,
                horizon=H_nom - k,
                s0=env.state,
                psi_g=psi_g,
                zeta=zeta,
                t_offset=k,
                nominal_horizon=H_nom,
            )
            rng_solve = make_rng(config.seed, p_idx, k)
            traj, report = solve(sub, config, init=warm, rng=rng_solve)
            control = traj.controls[0]
            next_state, events = sim_step(
                env.spec, env.sim_config, template.mode, env.state, control, env.rng
            )
            env.state = next_state
            report["slipped"] = events["slipped"]
            sub_reports.append(report)
            exec_states.append(next_state)
            exec_controls.append(control)
            if detect_drop(env.spec, env.sim_config, template.mode, env.state):
                results.sub_trajectories.append(
                    Trajectory(exec_states, exec_controls, template.mode)
                )
                results.reports.append(sub_reports)
                results.sub_goals.append(psi_g)
                results.sub_zetas.append(zeta)
                results.dropped = True
                results.final_state = env.state
                return results
            warm = _shift_warm_start(traj, env.state)
        results.sub_trajectories.append(
            Trajectory(exec_states, exec_controls, template.mode)
        )
        results.reports.append(sub_reports)
        results.sub_goals.append(psi_g)
        results.sub_zetas.append(zeta)
    results.final_state = env.state
    return results

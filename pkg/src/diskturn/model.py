"""Planar quasi-static contact model for multi-finger disk turning.

Geometry: a disk of radius `disk_radius` spins about a fixed pivot. Each finger
is a planar revolute chain anchored at `finger_bases[i]`; at zero joint angles
the chain points from its base straight at the pivot. Object state is the disk
angle psi. Contact frames on the disk surface use the inward normal (fingertip
toward pivot) and the counterclockwise tangent, so a tangential force f_t
exerts torque disk_radius * f_t about the pivot.

All residual evaluators are pure functions and broadcast over arbitrary
leading batch axes; `stack_constraints` assembles the full equality /
inequality system for one trajectory together with dense Jacobians in a
documented, deterministic row order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .util import rot2d, drot2d

ENV_SCHEMA = "diskturn-env-v1"


class InputError(ValueError):
    """Raised on dimension mismatches or malformed inputs."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ControlBounds:
    """Elementwise control box: joint deltas, contact force components, torque."""

    dq: float = 0.35
    f_n: float = 3.0
    f_t: float = 3.0
    tau_e: float = 0.2

    def to_dict(self, lower: bool) -> dict:
        if lower:
            return {"dq": -self.dq, "f_n": 0.0, "f_t": -self.f_t, "tau_e": -self.tau_e}
        return {"dq": self.dq, "f_n": self.f_n, "f_t": self.f_t, "tau_e": self.tau_e}


@dataclass
class EnvSpec:
    """Static environment description: hand geometry, disk, friction, bounds."""

    n_f: int = 3
    joints_per_finger: int = 2
    link_lengths: np.ndarray = field(default_factory=lambda: np.array([1.2, 1.2]))
    finger_bases: np.ndarray = field(
        default_factory=lambda: np.array(
            [[0.0, 2.0], [-1.7320508075688772, -1.0], [1.7320508075688772, -1.0]]
        )
    )
    disk_radius: float = 1.0
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(2))
    mu: float = 0.8
    tau_max: float = 0.2
    delta: float = 0.05
    q_min: float = -2.9
    q_max: float = 2.9
    u_min: ControlBounds = field(default_factory=ControlBounds)
    u_max: ControlBounds = field(default_factory=ControlBounds)

    def __post_init__(self):
        self.link_lengths = np.asarray(self.link_lengths, dtype=float)
        self.finger_bases = np.asarray(self.finger_bases, dtype=float)
        self.pivot = np.asarray(self.pivot, dtype=float)
        if self.disk_radius <= 0:
            raise InputError("disk_radius must be positive")
        if self.mu <= 0 or self.delta <= 0:
            raise InputError("mu and delta must be positive")
        if not self.q_min < self.q_max:
            raise InputError("q_min must be below q_max")
        if self.finger_bases.shape != (self.n_f, 2):
            raise InputError("finger_bases must have shape (n_f, 2)")
        if self.link_lengths.shape != (self.joints_per_finger,):
            raise InputError("link_lengths must have one entry per joint")
        base_dist = np.linalg.norm(self.finger_bases - self.pivot, axis=1)
        if np.any(base_dist <= self.disk_radius):
            raise InputError("every finger base must lie strictly outside the disk")

    @property
    def base_angles(self) -> np.ndarray:
        """Zero-configuration heading of each chain (base toward pivot)."""
        d = self.pivot - self.finger_bases
        return np.arctan2(d[:, 1], d[:, 0])

    def to_json(self) -> dict:
        return {
            "schema": ENV_SCHEMA,
            "n_f": self.n_f,
            "joints_per_finger": self.joints_per_finger,
            "link_lengths": self.link_lengths.tolist(),
            "finger_bases": self.finger_bases.tolist(),
            "disk_radius": self.disk_radius,
            "pivot": self.pivot.tolist(),
            "mu": self.mu,
            "tau_max": self.tau_max,
            "delta": self.delta,
            "q_min": self.q_min,
            "q_max": self.q_max,
            "u_min": self.u_min.to_dict(lower=True),
            "u_max": self.u_max.to_dict(lower=False),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EnvSpec":
        if doc.get("schema", ENV_SCHEMA) != ENV_SCHEMA:
            raise InputError(f"unknown env schema {doc.get('schema')!r}")
        bounds = ControlBounds(
            dq=doc["u_max"]["dq"],
            f_n=doc["u_max"]["f_n"],
            f_t=doc["u_max"]["f_t"],
            tau_e=doc["u_max"]["tau_e"],
        )
        return cls(
            n_f=doc["n_f"],
            joints_per_finger=doc["joints_per_finger"],
            link_lengths=np.asarray(doc["link_lengths"], dtype=float),
            finger_bases=np.asarray(doc["finger_bases"], dtype=float),
            disk_radius=doc["disk_radius"],
            pivot=np.asarray(doc["pivot"], dtype=float),
            mu=doc["mu"],
            tau_max=doc["tau_max"],
            delta=doc["delta"],
            q_min=doc["q_min"],
            q_max=doc["q_max"],
            u_min=bounds,
            u_max=bounds,
        )

    @classmethod
    def load(cls, path) -> "EnvSpec":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class ContactMode:
    """Per-finger contact assignment: 1 sticks throughout, 0 regrasps."""

    bits: tuple

    def __post_init__(self):
        self.bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in self.bits):
            raise InputError("contact mode bits must be 0 or 1")

    @property
    def n_f(self) -> int:
        return len(self.bits)

    @property
    def contact_indices(self) -> tuple:
        return tuple(i for i, b in enumerate(self.bits) if b == 1)

    @property
    def regrasp_indices(self) -> tuple:
        return tuple(i for i, b in enumerate(self.bits) if b == 0)

    @property
    def n_contact(self) -> int:
        return len(self.contact_indices)

    def key(self) -> str:
        return "".join(str(b) for b in self.bits)


@dataclass
class State:
    """Joint configuration of every finger plus the disk angle."""

    q: np.ndarray  # (n_f, joints_per_finger)
    psi: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.psi = float(self.psi)

    def copy(self) -> "State":
        return State(self.q.copy(), self.psi)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.q.ravel(), [self.psi]])


@dataclass
class Control:
    """Joint deltas for every finger, contact forces for mode-1 fingers
    (rows ordered by finger index, columns (f_n, f_t)), environment torque."""

    dq: np.ndarray  # (n_f, joints_per_finger)
    f: np.ndarray  # (n_contact, 2)
    tau_e: float

    def __post_init__(self):
        self.dq = np.asarray(self.dq, dtype=float)
        self.f = np.asarray(self.f, dtype=float).reshape(-1, 2)
        self.tau_e = float(self.tau_e)

    def copy(self) -> "Control":
        return Control(self.dq.copy(), self.f.copy(), self.tau_e)


@dataclass
class Trajectory:
    """H+1 states (states[0] fixed) and H controls under one contact mode."""

    states: list
    controls: list
    mode: ContactMode

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise InputError("need exactly one more state than controls")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def q_array(self) -> np.ndarray:
        return np.stack([s.q for s in self.states])

    def psi_array(self) -> np.ndarray:
        return np.array([s.psi for s in self.states])

    def dq_array(self) -> np.ndarray:
        return np.stack([c.dq for c in self.controls])

    def f_array(self) -> np.ndarray:
        n_c = self.mode.n_contact
        if self.horizon == 0:
            return np.zeros((0, n_c, 2))
        return np.stack([c.f for c in self.controls]).reshape(self.horizon, n_c, 2)

    def tau_array(self) -> np.ndarray:
        return np.array([c.tau_e for c in self.controls])


# ---------------------------------------------------------------------------
# kinematics and signed distance
# ---------------------------------------------------------------------------


def fk_all(spec: EnvSpec, q: np.ndarray, with_jacobian: bool = True):
    """Fingertip positions (and Jacobians) for all fingers.

    q has shape (..., n_f, J). Returns tips (..., n_f, 2) and, when requested,
    the 2xJ Jacobians (..., n_f, 2, J).
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-2:] != (spec.n_f, spec.joints_per_finger):
        raise InputError(
            f"expected joint array (..., {spec.n_f}, {spec.joints_per_finger}), "
            f"got {q.shape}"
        )
    # absolute heading of link k: base heading + cumulative joint angles
    angles = spec.base_angles.reshape(
        (1,) * (q.ndim - 2) + (spec.n_f, 1)
    ) + np.cumsum(q, axis=-1)
    seg = spec.link_lengths * np.stack([np.cos(angles), np.sin(angles)], axis=-2)
    tips = spec.finger_bases + seg.sum(axis=-1)
    if not with_jacobian:
        return tips, None
    # d tip / d q_j = sum over links at or beyond j of l_k * (-sin, cos)
    perp = spec.link_lengths * np.stack([-np.sin(angles), np.cos(angles)], axis=-2)
    jac = np.flip(np.cumsum(np.flip(perp, axis=-1), axis=-1), axis=-1)
    return tips, jac


def fingertip_fk(spec: EnvSpec, finger_index: int, q_i: np.ndarray):
    """Single fingertip position and its 2xJ Jacobian."""
    q_i = np.asarray(q_i, dtype=float)
    if q_i.shape != (spec.joints_per_finger,):
        raise InputError(
            f"finger {finger_index} expects {spec.joints_per_finger} joints, "
            f"got shape {q_i.shape}"
        )
    if not 0 <= finger_index < spec.n_f:
        raise InputError(f"finger index {finger_index} out of range")
    angles = spec.base_angles[finger_index] + np.cumsum(q_i)
    seg = spec.link_lengths[:, None] * np.stack(
        [np.cos(angles), np.sin(angles)], axis=1
    )
    tip = spec.finger_bases[finger_index] + seg.sum(axis=0)
    perp = spec.link_lengths[:, None] * np.stack(
        [-np.sin(angles), np.cos(angles)], axis=1
    )
    jac = np.flip(np.cumsum(np.flip(perp, axis=0), axis=0), axis=0).T
    return tip, jac


class SignedDistance(NamedTuple):
    dist: float
    grad: np.ndarray
    degenerate: bool


def signed_distance(spec: EnvSpec, p: np.ndarray) -> SignedDistance:
    """Distance to the disk surface: positive outside, negative inside.

    At the pivot the radial direction is undefined; the gradient is zeroed and
    flagged so callers can treat the point as a hard violation.
    """
    rel = np.asarray(p, dtype=float) - spec.pivot
    norm = float(np.linalg.norm(rel))
    if norm == 0.0:
        return SignedDistance(-spec.disk_radius, np.zeros(2), True)
    return SignedDistance(norm - spec.disk_radius, rel / norm, False)


def _sd_batch(spec: EnvSpec, tips: np.ndarray):
    """Batched signed distance + gradient; degenerate points get zero grad."""
    rel = tips - spec.pivot
    norm = np.linalg.norm(rel, axis=-1)
    safe = np.where(norm > 0.0, norm, 1.0)
    grad = rel / safe[..., None]
    grad = np.where(norm[..., None] > 0.0, grad, 0.0)
    return norm - spec.disk_radius, grad


# ---------------------------------------------------------------------------
# residual families
# ---------------------------------------------------------------------------


def contact_residual(spec: EnvSpec, mode: ContactMode, state: State):
    """Surface distance of every mode-1 fingertip (equality target 0).

    Returns the residual vector (n_contact,) and its Jacobian with respect to
    the flattened state [q.ravel(), psi].
    """
    idx = list(mode.contact_indices)
    nq = spec.n_f * spec.joints_per_finger
    res = np.zeros(len(idx))
    jac = np.zeros((len(idx), nq + 1))
    tips, jtips = fk_all(spec, state.q)
    dist, grad = _sd_batch(spec, tips)
    for row, i in enumerate(idx):
        res[row] = dist[i]
        cols = slice(i * spec.joints_per_finger, (i + 1) * spec.joints_per_finger)
        jac[row, cols] = grad[i] @ jtips[i]
    return res, jac


def kinematics_residual(spec: EnvSpec, mode: ContactMode, state_t: State, state_t1: State):
    """Sticking-contact residual: each mode-1 fingertip must ride the disk.

    residual_i = tip_i(t+1) - pivot - R(dpsi) (tip_i(t) - pivot). Returns the
    stacked (2 * n_contact,) vector plus Jacobians w.r.t. both flattened states.
    """
    idx = list(mode.contact_indices)
    nq = spec.n_f * spec.joints_per_finger
    J = spec.joints_per_finger
    dpsi = state_t1.psi - state_t.psi
    R = rot2d(dpsi)
    dR = drot2d(dpsi)
    tips_t, jac_t = fk_all(spec, state_t.q)
    tips_t1, jac_t1 = fk_all(spec, state_t1.q)
    res = np.zeros(2 * len(idx))
    Jt = np.zeros((2 * len(idx), nq + 1))
    Jt1 = np.zeros((2 * len(idx), nq + 1))
    for row, i in enumerate(idx):
        rel = tips_t[i] - spec.pivot
        sl = slice(2 * row, 2 * row + 2)
        res[sl] = tips_t1[i] - spec.pivot - R @ rel
        cols = slice(i * J, (i + 1) * J)
        Jt1[sl, cols] = jac_t1[i]
        Jt1[sl, nq] = -dR @ rel
        Jt[sl, cols] = -R @ jac_t[i]
        Jt[sl, nq] = dR @ rel
    return res, Jt, Jt1


def balance_residual(
    spec: EnvSpec,
    mode: ContactMode,
    state_t: State,
    state_t1: State,
    control_t: Control,
):
    """Quasi-static torque balance about the pivot.

    Normal force components point at the pivot and contribute no torque, so
    the net torque is disk_radius * sum(f_t) + tau_e. Returns the scalar and
    its gradient w.r.t. the flattened control [dq.ravel(), f.ravel(), tau_e].
    """
    n_c = mode.n_contact
    if control_t.f.shape[0] != n_c:
        raise InputError("control carries forces for the wrong number of fingers")
    ndq = spec.n_f * spec.joints_per_finger
    res = spec.disk_radius * control_t.f[:, 1].sum() + control_t.tau_e
    grad = np.zeros(ndq + 2 * n_c + 1)
    grad[ndq + 1 : ndq + 2 * n_c : 2] = spec.disk_radius
    grad[-1] = 1.0
    return float(res), grad


def friction_residual(spec: EnvSpec, mode: ContactMode, state_t: State, control_t: Control):
    """Friction-cone rows per contact finger: [-f_n, f_t - mu f_n, -f_t - mu f_n].

    All entries <= 0 exactly when f_n >= 0 and |f_t| <= mu f_n. Returns the
    (3 * n_contact,) vector and its Jacobian w.r.t. the flattened control.
    """
    n_c = mode.n_contact
    if control_t.f.shape[0] != n_c:
        raise InputError("control carries forces for the wrong number of fingers")
    ndq = spec.n_f * spec.joints_per_finger
    f = control_t.f
    res = np.stack([-f[:, 0], f[:, 1] - spec.mu * f[:, 0], -f[:, 1] - spec.mu * f[:, 0]], axis=1)
    jac = np.zeros((3 * n_c, ndq + 2 * n_c + 1))
    for ci in range(n_c):
        col = ndq + 2 * ci
        jac[3 * ci + 0, col] = -1.0
        jac[3 * ci + 1, col] = -spec.mu
        jac[3 * ci + 1, col + 1] = 1.0
        jac[3 * ci + 2, col] = -spec.mu
        jac[3 * ci + 2, col + 1] = -1.0
    return res.ravel(), jac


def regrasp_residuals(spec: EnvSpec, mode: ContactMode, trajectory: Trajectory):
    """Clearance inequalities and terminal/consistency equalities for mode-0 fingers.

    ineq: delta - distance(tip) for t = 1..H-1 (satisfied <= 0 keeps regrasping
    fingertips at least delta off the surface). eq: terminal surface contact at
    t = H followed by the joint consistency rows q_t + dq_t - q_{t+1} for the
    regrasping fingers.
    """
    idx = list(mode.regrasp_indices)
    if not idx:
        return np.zeros(0), np.zeros(0)
    H = trajectory.horizon
    q = trajectory.q_array()
    dq = trajectory.dq_array()
    tips, _ = fk_all(spec, q, with_jacobian=False)
    dist, _ = _sd_batch(spec, tips)
    ineq = np.array([spec.delta - dist[t, i] for t in range(1, H) for i in idx])
    terminal = np.array([dist[H, i] for i in idx])
    cons = np.concatenate(
        [(q[t, i] + dq[t, i] - q[t + 1, i]) for t in range(H) for i in idx]
    ) if H > 0 else np.zeros(0)
    return ineq, np.concatenate([terminal, cons])


# ---------------------------------------------------------------------------
# full problem stack
# ---------------------------------------------------------------------------


class VarLayout:
    """Flat decision-vector layout for one (mode, horizon) sub-task.

    Order: states s_1..s_H (each [q.ravel(), psi]) followed by controls
    u_0..u_{H-1} (each [dq.ravel(), f.ravel(), tau_e]).
    """

    def __init__(self, spec: EnvSpec, mode: ContactMode, horizon: int):
        if horizon < 1:
            raise InputError("horizon must be >= 1")
        if mode.n_f != spec.n_f:
            raise InputError("mode length must match finger count")
        self.spec = spec
        self.mode = mode
        self.H = horizon
        self.J = spec.joints_per_finger
        self.nq = spec.n_f * self.J
        self.n_c = mode.n_contact
        self.ds = self.nq + 1
        self.dc = self.nq + 2 * self.n_c + 1
        self.dim = horizon * (self.ds + self.dc)
        self.ctrl0 = horizon * self.ds

    # column helpers (t in 1..H for states, k in 0..H-1 for controls)
    def col_q(self, t: int) -> slice:
        return slice((t - 1) * self.ds, (t - 1) * self.ds + self.nq)

    def col_psi(self, t: int) -> int:
        return (t - 1) * self.ds + self.nq

    def col_dq(self, k: int) -> slice:
        return slice(self.ctrl0 + k * self.dc, self.ctrl0 + k * self.dc + self.nq)

    def col_f(self, k: int) -> slice:
        start = self.ctrl0 + k * self.dc + self.nq
        return slice(start, start + 2 * self.n_c)

    def col_tau(self, k: int) -> int:
        return self.ctrl0 + (k + 1) * self.dc - 1

    def pack(self, traj: Trajectory) -> np.ndarray:
        if traj.horizon != self.H:
            raise InputError("trajectory horizon does not match layout")
        z = np.zeros(self.dim)
        for t in range(1, self.H + 1):
            z[self.col_q(t)] = traj.states[t].q.ravel()
            z[self.col_psi(t)] = traj.states[t].psi
        for k in range(self.H):
            z[self.col_dq(k)] = traj.controls[k].dq.ravel()
            z[self.col_f(k)] = traj.controls[k].f.ravel()
            z[self.col_tau(k)] = traj.controls[k].tau_e
        return z

    def unpack(self, z: np.ndarray, s0: State) -> Trajectory:
        states = [s0.copy()]
        controls = []
        for t in range(1, self.H + 1):
            states.append(
                State(z[self.col_q(t)].reshape(self.spec.n_f, self.J), z[self.col_psi(t)])
            )
        for k in range(self.H):
            controls.append(
                Control(
                    z[self.col_dq(k)].reshape(self.spec.n_f, self.J),
                    z[self.col_f(k)].reshape(self.n_c, 2),
                    z[self.col_tau(k)],
                )
            )
        return Trajectory(states, controls, self.mode)

    def arrays(self, zb: np.ndarray, s0: State):
        """Batched unpack: (P, dim) -> dict of (P, ...) arrays including s0."""
        zb = np.atleast_2d(zb)
        P = zb.shape[0]
        H, nq, J = self.H, self.nq, self.J
        sb = zb[:, : self.ctrl0].reshape(P, H, self.ds)
        cb = zb[:, self.ctrl0 :].reshape(P, H, self.dc)
        q = np.concatenate(
            [
                np.broadcast_to(s0.q, (P, 1, self.spec.n_f, J)),
                sb[:, :, :nq].reshape(P, H, self.spec.n_f, J),
            ],
            axis=1,
        )
        psi = np.concatenate(
            [np.full((P, 1), s0.psi), sb[:, :, nq]], axis=1
        )
        return {
            "q": q,
            "psi": psi,
            "dq": cb[:, :, :nq].reshape(P, H, self.spec.n_f, J),
            "f": cb[:, :, nq : nq + 2 * self.n_c].reshape(P, H, self.n_c, 2),
            "tau": cb[:, :, -1],
        }

    def bounds(self):
        """Elementwise box (lo, hi) on the decision vector; psi is unbounded."""
        spec = self.spec
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        for t in range(1, self.H + 1):
            lo[self.col_q(t)] = spec.q_min
            hi[self.col_q(t)] = spec.q_max
        for k in range(self.H):
            lo[self.col_dq(k)] = -spec.u_max.dq
            hi[self.col_dq(k)] = spec.u_max.dq
            fsl = self.col_f(k)
            lo[fsl.start : fsl.stop : 2] = 0.0
            hi[fsl.start : fsl.stop : 2] = spec.u_max.f_n
            lo[fsl.start + 1 : fsl.stop : 2] = -spec.u_max.f_t
            hi[fsl.start + 1 : fsl.stop : 2] = spec.u_max.f_t
            lo[self.col_tau(k)] = -spec.u_max.tau_e
            hi[self.col_tau(k)] = spec.u_max.tau_e
        return lo, hi


class ConstraintStack(NamedTuple):
    h: np.ndarray
    g: np.ndarray
    Jh: np.ndarray
    Jg: np.ndarray
    h_labels: list
    g_labels: list


def eval_blocks(spec: EnvSpec, mode: ContactMode, arrs: dict, with_jac: bool = True):
    """Batched residual families for unpacked trajectory arrays.

    arrs holds q (P, H+1, n_f, J), psi (P, H+1), dq (P, H, n_f, J),
    f (P, H, n_c, 2), tau (P, H). Returns a dict of residual arrays and the
    Jacobian pieces needed to assemble or contract the constraint system.
    Row families (time-major within each family):

      equalities:   contact (t=1..H), kinematics (steps 0..H-1; with zero
                    contact fingers a single disk-freeze row psi_{t+1}-psi_t),
                    balance (steps), regrasp terminal contact (t=H),
                    joint consistency q_t + dq_t - q_{t+1} (all fingers, steps)
      inequalities: friction (steps), regrasp clearance (t=1..H-1)
    """
    q, psi, dq, f, tau = arrs["q"], arrs["psi"], arrs["dq"], arrs["f"], arrs["tau"]
    P, H1 = psi.shape
    H = H1 - 1
    con = list(mode.contact_indices)
    reg = list(mode.regrasp_indices)
    tips, jtips = fk_all(spec, q, with_jacobian=with_jac)
    dist, sd_grad = _sd_batch(spec, tips)

    out = {"tips": tips, "jtips": jtips, "dist": dist, "sd_grad": sd_grad}

    # contact: dist at t=1..H for contact fingers -> (P, H, n_c)
    out["contact"] = dist[:, 1:, con]
    if with_jac:
        # (P, H, n_c, J): sd_grad^T @ fk jacobian
        out["contact_jq"] = np.einsum(
            "phcx,phcxj->phcj", sd_grad[:, 1:, con], jtips[:, 1:, con]
        )

    # kinematics: steps s=0..H-1
    dpsi = psi[:, 1:] - psi[:, :-1]  # (P, H)
    R = rot2d(dpsi)  # (P, H, 2, 2)
    dR = drot2d(dpsi)
    rel = tips[:, :-1, con] - spec.pivot  # (P, H, n_c, 2)
    rot_rel = np.einsum("phxy,phcy->phcx", R, rel)
    out["kin"] = tips[:, 1:, con] - spec.pivot - rot_rel  # (P, H, n_c, 2)
    out["psi_freeze"] = dpsi if not con else None
    if with_jac:
        out["kin_jq_next"] = jtips[:, 1:, con]  # (P, H, n_c, 2, J)
        out["kin_jq_cur"] = -np.einsum("phxy,phcyj->phcxj", R, jtips[:, :-1, con])
        ddpsi = np.einsum("phxy,phcy->phcx", dR, rel)  # (P, H, n_c, 2)
        out["kin_jpsi_next"] = -ddpsi
        out["kin_jpsi_cur"] = ddpsi

    # balance: (P, H)
    out["balance"] = spec.disk_radius * f[..., 1].sum(axis=-1) + tau

    # terminal regrasp contact at t=H: (P, n_r)
    out["terminal"] = dist[:, H, reg]
    if with_jac:
        out["terminal_jq"] = np.einsum(
            "pcx,pcxj->pcj", sd_grad[:, H, reg], jtips[:, H, reg]
        )

    # consistency for all fingers: (P, H, n_f, J)
    out["cons"] = q[:, :-1] + dq - q[:, 1:]

    # friction: (P, H, n_c, 3)
    fn, ft = f[..., 0], f[..., 1]
    out["friction"] = np.stack(
        [-fn, ft - spec.mu * fn, -ft - spec.mu * fn], axis=-1
    )

    # clearance: t = 1..H-1 -> (P, H-1, n_r)
    out["clearance"] = spec.delta - dist[:, 1 : H, reg]
    if with_jac:
        out["clearance_jq"] = -np.einsum(
            "phcx,phcxj->phcj", sd_grad[:, 1:H, reg], jtips[:, 1:H, reg]
        )
    return out


def stack_constraints(spec: EnvSpec, mode: ContactMode, trajectory: Trajectory) -> ConstraintStack:
    """Assemble h(z) = 0, g(z) <= 0 and dense Jacobians for one trajectory.

    Row order (stable and bit-reproducible):
      h: contact | kinematics (or disk-freeze when no finger is in contact) |
         balance | regrasp terminal contact | joint consistency (all fingers)
      g: friction | regrasp clearance | box upper/lower on q | box upper/lower
         on controls
    Columns follow VarLayout (states s_1..s_H then controls u_0..u_{H-1}).
    """
    lay = VarLayout(spec, mode, trajectory.horizon)
    z = lay.pack(trajectory)
    arrs = lay.arrays(z[None, :], trajectory.states[0])
    blocks = eval_blocks(spec, mode, arrs)
    H, J, nq, n_c = lay.H, lay.J, lay.nq, lay.n_c
    con = list(mode.contact_indices)
    reg = list(mode.regrasp_indices)
    n_r = len(reg)

    h_parts, h_labels, Jh_rows = [], [], []

    def add_h(vals, labels, jac_fill):
        h_parts.append(np.atleast_1d(vals))
        h_labels.extend(labels)
        Jh_rows.append(jac_fill)

    # contact rows
    c_res = blocks["contact"][0]
    c_jq = blocks["contact_jq"][0]
    Jc = np.zeros((H * len(con), lay.dim))
    for ti in range(H):
        for row, i in enumerate(con):
            r = ti * len(con) + row
            Jc[r, (ti) * lay.ds + i * J : (ti) * lay.ds + (i + 1) * J] = c_jq[ti, row]
    add_h(c_res.ravel(), [f"contact[t={t},f={i}]" for t in range(1, H + 1) for i in con], Jc)

    # kinematics rows (sticking, or disk freeze when nothing is in contact)
    if con:
        k_res = blocks["kin"][0]
        Jk = np.zeros((H * len(con) * 2, lay.dim))
        for s in range(H):
            for row, i in enumerate(con):
                r = (s * len(con) + row) * 2
                Jk[r : r + 2, lay.col_psi(s + 1)] = blocks["kin_jpsi_next"][0, s, row]
                Jk[r : r + 2, (s) * lay.ds + i * J : (s) * lay.ds + (i + 1) * J] = blocks[
                    "kin_jq_next"
                ][0, s, row]
                if s >= 1:
                    Jk[r : r + 2, lay.col_psi(s)] = blocks["kin_jpsi_cur"][0, s, row]
                    Jk[
                        r : r + 2, (s - 1) * lay.ds + i * J : (s - 1) * lay.ds + (i + 1) * J
                    ] = blocks["kin_jq_cur"][0, s, row]
        add_h(
            k_res.ravel(),
            [
                f"kinematics[s={s},f={i},{ax}]"
                for s in range(H)
                for i in con
                for ax in ("x", "y")
            ],
            Jk,
        )
    else:
        k_res = blocks["psi_freeze"][0]
        Jk = np.zeros((H, lay.dim))
        for s in range(H):
            Jk[s, lay.col_psi(s + 1)] = 1.0
            if s >= 1:
                Jk[s, lay.col_psi(s)] = -1.0
        add_h(k_res, [f"kinematics[s={s},freeze]" for s in range(H)], Jk)

    # balance rows
    b_res = blocks["balance"][0]
    Jb = np.zeros((H, lay.dim))
    for k in range(H):
        fsl = lay.col_f(k)
        Jb[k, fsl.start + 1 : fsl.stop : 2] = spec.disk_radius
        Jb[k, lay.col_tau(k)] = 1.0
    add_h(b_res, [f"balance[s={k}]" for k in range(H)], Jb)

    # regrasp terminal contact
    if n_r:
        t_res = blocks["terminal"][0]
        Jt = np.zeros((n_r, lay.dim))
        for row, i in enumerate(reg):
            Jt[row, (H - 1) * lay.ds + i * J : (H - 1) * lay.ds + (i + 1) * J] = blocks[
                "terminal_jq"
            ][0, row]
        add_h(t_res, [f"terminal_contact[f={i}]" for i in reg], Jt)

    # joint consistency, all fingers
    cons = blocks["cons"][0]
    Jcons = np.zeros((H * nq, lay.dim))
    for s in range(H):
        rows = slice(s * nq, (s + 1) * nq)
        Jcons[rows, lay.col_dq(s)] = np.eye(nq)
        Jcons[rows, lay.col_q(s + 1)] = -np.eye(nq)
        if s >= 1:
            Jcons[rows, lay.col_q(s)] = np.eye(nq)
    add_h(
        cons.reshape(H * nq),
        [
            f"consistency[s={s},f={i},j={j}]"
            for s in range(H)
            for i in range(spec.n_f)
            for j in range(J)
        ],
        Jcons,
    )

    h = np.concatenate(h_parts) if h_parts else np.zeros(0)
    Jh = np.concatenate(Jh_rows, axis=0) if Jh_rows else np.zeros((0, lay.dim))

    g_parts, g_labels, Jg_rows = [], [], []

    # friction rows
    fr = blocks["friction"][0]
    Jf = np.zeros((H * n_c * 3, lay.dim))
    for k in range(H):
        for ci in range(n_c):
            col = lay.col_f(k).start + 2 * ci
            r = (k * n_c + ci) * 3
            Jf[r, col] = -1.0
            Jf[r + 1, col] = -spec.mu
            Jf[r + 1, col + 1] = 1.0
            Jf[r + 2, col] = -spec.mu
            Jf[r + 2, col + 1] = -1.0
    g_parts.append(fr.reshape(-1))
    g_labels.extend(
        f"friction[s={k},f={i},{name}]"
        for k in range(H)
        for i in con
        for name in ("fn>=0", "ft<=mu*fn", "-ft<=mu*fn")
    )
    Jg_rows.append(Jf)

    # clearance rows
    if n_r and H > 1:
        cl = blocks["clearance"][0]
        Jcl = np.zeros(((H - 1) * n_r, lay.dim))
        for ti in range(H - 1):
            for row, i in enumerate(reg):
                r = ti * n_r + row
                Jcl[r, ti * lay.ds + i * J : ti * lay.ds + (i + 1) * J] = blocks[
                    "clearance_jq"
                ][0, ti, row]
        g_parts.append(cl.ravel())
        g_labels.extend(
            f"clearance[t={t},f={i}]" for t in range(1, H) for i in reg
        )
        Jg_rows.append(Jcl)

    # box rows: q upper/lower then control upper/lower
    lo, hi = lay.bounds()
    finite_hi = np.where(np.isfinite(hi))[0]
    finite_lo = np.where(np.isfinite(lo))[0]
    state_cols = set(range(lay.ctrl0))
    for name, cols in (
        ("box_q_hi", [c for c in finite_hi if c in state_cols]),
        ("box_q_lo", [c for c in finite_lo if c in state_cols]),
        ("box_u_hi", [c for c in finite_hi if c not in state_cols]),
        ("box_u_lo", [c for c in finite_lo if c not in state_cols]),
    ):
        cols = np.array(cols, dtype=int)
        if cols.size == 0:
            continue
        sign = 1.0 if name.endswith("hi") else -1.0
        bound = hi[cols] if sign > 0 else lo[cols]
        g_parts.append(sign * (z[cols] - bound))
        g_labels.extend(f"{name}[col={c}]" for c in cols)
        Jbox = np.zeros((cols.size, lay.dim))
        Jbox[np.arange(cols.size), cols] = sign
        Jg_rows.append(Jbox)

    g = np.concatenate(g_parts) if g_parts else np.zeros(0)
    Jg = np.concatenate(Jg_rows, axis=0) if Jg_rows else np.zeros((0, lay.dim))
    return ConstraintStack(h, g, Jh, Jg, h_labels, g_labels)

"""Quasi-static execution environment.

Joint commands execute with optional actuation noise; the disk angle follows
the rigid rotation that best explains the displacement of in-contact
fingertips, gated by what torque the planned contact forces can actually
transmit through the friction cone. Purpose-built (no physics engine) so that
executing an exactly feasible plan reproduces it to numerical precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    Control,
    ContactMode,
    EnvSpec,
    InputError,
    State,
    _sd_batch,
    fingertip_fk,
    fk_all,
)
from .util import cross2d, rot2d


@dataclass
class SimConfig:
    """Execution-side knobs; tolerances are lengths in workspace units."""

    joint_noise_std: float = 0.002
    slip_threshold: float = 0.0
    contact_tol: float = 0.01
    drop_tol: float = 0.05
    resolve_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.contact_tol <= 0 or self.drop_tol <= 0:
            raise InputError("tolerances must be positive")
        if self.resolve_iters < 1:
            raise InputError("resolve_iters must be >= 1")

    def to_json(self) -> dict:
        return {
            "joint_noise_std": self.joint_noise_std,
            "slip_threshold": self.slip_threshold,
            "contact_tol": self.contact_tol,
            "drop_tol": self.drop_tol,
            "resolve_iters": self.resolve_iters,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SimConfig":
        return cls(**doc)


def default_grasp_state(spec: EnvSpec, psi: float = 0.0) -> State:
    """Nominal stable grasp: every fingertip on the surface point nearest its
    base, elbow-out branch of the two-link closed form."""
    if spec.joints_per_finger != 2:
        raise InputError("closed-form grasp needs two-joint fingers")
    l1, l2 = spec.link_lengths
    q = np.zeros((spec.n_f, 2))
    for i in range(spec.n_f):
        d = np.linalg.norm(spec.finger_bases[i] - spec.pivot) - spec.disk_radius
        if not abs(l1 - l2) <= d <= l1 + l2:
            raise InputError(f"finger {i} cannot reach the disk surface")
        c2 = (d * d - l1 * l1 - l2 * l2) / (2 * l1 * l2)
        q2 = np.arccos(np.clip(c2, -1.0, 1.0))
        q1 = -np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
        q[i] = (q1, q2)
    q = np.clip(q, spec.q_min, spec.q_max)
    return State(q, psi)


@dataclass
class InitSampler:
    """Initial-state distribution: joints jittered around a stable grasp,
    disk angle uniform on [0, 2pi)."""

    spec: EnvSpec
    default_state: Optional[State] = None
    joint_std: float = 0.05
    contact_tol: float = 0.01

    def __post_init__(self):
        if self.default_state is None:
            self.default_state = default_grasp_state(self.spec)
        tips, _ = fk_all(self.spec, self.default_state.q, with_jacobian=False)
        dist, _ = _sd_batch(self.spec, tips)
        if np.any(np.abs(dist) > self.contact_tol):
            raise InputError("default_state must hold all fingertips on the surface")


def sample_initial_state(sampler: InitSampler, rng: np.random.Generator) -> State:
    """Joints = default + N(0, joint_std^2) clamped to limits; psi ~ U[0, 2pi).

    Draw order is joints then psi, one call each, so streams are reproducible.
    """
    spec = sampler.spec
    noise = rng.normal(0.0, sampler.joint_std, size=sampler.default_state.q.shape)
    q = np.clip(sampler.default_state.q + noise, spec.q_min, spec.q_max)
    psi = rng.uniform(0.0, 2.0 * np.pi)
    return State(q, psi)


def _project_to_surface(spec, finger, q_i, iters):
    """Damped least squares driving the fingertip's surface distance to zero."""
    q = np.array(q_i, dtype=float)
    for _ in range(iters):
        tip, J = fingertip_fk(spec, finger, q)
        rel = tip - spec.pivot
        norm = np.linalg.norm(rel)
        if norm == 0.0:
            # radial direction undefined; nudge along the first joint
            q[0] += 1e-3
            continue
        r = norm - spec.disk_radius
        if abs(r) <= 1e-11:
            break
        Jr = (rel / norm) @ J  # (J,)
        q = q - Jr * (r / (Jr @ Jr + 1e-12))
        q = np.clip(q, spec.q_min, spec.q_max)
    return q


def _project_to_point(spec, finger, q_i, target, iters):
    """Damped least squares pulling the fingertip onto a workspace point."""
    q = np.array(q_i, dtype=float)
    for _ in range(iters):
        tip, J = fingertip_fk(spec, finger, q)
        err = target - tip
        if np.linalg.norm(err) <= 1e-11:
            break
        JJt = J @ J.T + 1e-9 * np.eye(2)
        q = q + J.T @ np.linalg.solve(JJt, err)
        q = np.clip(q, spec.q_min, spec.q_max)
    return q


def resolve_and_filter(spec: EnvSpec, cfg: SimConfig, state: State) -> Optional[State]:
    """Push penetrating or separated fingertips onto the surface; drop the
    sample when that fails.

    Returns None when joint limits are violated, penetration deeper than 1e-3
    remains, or some fingertip cannot be brought within drop_tol of the
    surface. States already valid pass through unchanged.
    """
    if np.any(state.q < spec.q_min) or np.any(state.q > spec.q_max):
        return None
    q = state.q.copy()
    tips, _ = fk_all(spec, q, with_jacobian=False)
    dist, _ = _sd_batch(spec, tips)
    touched = False
    for i in range(spec.n_f):
        if dist[i] < 0.0 or dist[i] > cfg.drop_tol:
            q[i] = _project_to_surface(spec, i, q[i], cfg.resolve_iters)
            touched = True
    if not touched:
        return state
    tips, _ = fk_all(spec, q, with_jacobian=False)
    dist, _ = _sd_batch(spec, tips)
    if np.any(dist < -1e-3) or np.any(dist > cfg.drop_tol):
        return None
    return State(q, state.psi)


def step(
    spec: EnvSpec,
    cfg: SimConfig,
    mode: ContactMode,
    state: State,
    control: Control,
    rng: Optional[np.random.Generator] = None,
):
    """Advance one quasi-static step; returns (next_state, events).

    q advances by the commanded delta plus actuation noise, clamped. The disk
    angle moves by the least-squares rigid rotation of the in-contact
    fingertips (mode bit 1, within contact_tol before the step), applied only
    to the extent the planned forces transmit |tau_e| through the friction
    cone; shortfall scales the rotation and sets events["slipped"]. In-contact
    fingertips near their rotated material points are re-projected onto them,
    and any fingertip left deeper than contact_tol inside the disk is pushed
    back out.
    """
    if control.f.shape[0] != mode.n_contact:
        raise InputError("control carries forces for the wrong number of fingers")
    if rng is not None and cfg.joint_noise_std > 0.0:
        noise = rng.normal(0.0, cfg.joint_noise_std, size=state.q.shape)
    else:
        noise = 0.0
    q_next = np.clip(state.q + control.dq + noise, spec.q_min, spec.q_max)

    tips0, _ = fk_all(spec, state.q, with_jacobian=False)
    dist0, _ = _sd_batch(spec, tips0)
    in_contact = [i for i in mode.contact_indices if dist0[i] <= cfg.contact_tol]
    tips1, _ = fk_all(spec, q_next, with_jacobian=False)

    slipped = False
    dpsi = 0.0
    if in_contact:
        p = tips0[in_contact] - spec.pivot
        pn = tips1[in_contact] - spec.pivot
        num = float(cross2d(p, pn).sum())
        den = float((p * pn).sum())
        if num != 0.0 or den != 0.0:
            dpsi = float(np.arctan2(num, den))
        required = abs(control.tau_e)
        if dpsi != 0.0 and required > 0.0:
            rows = [mode.contact_indices.index(i) for i in in_contact]
            f_n = np.maximum(control.f[rows, 0], 0.0)
            f_t = np.clip(control.f[rows, 1], -spec.mu * f_n, spec.mu * f_n)
            supply = abs(spec.disk_radius * f_t.sum())
            if (supply - required) / required < cfg.slip_threshold:
                slipped = True
                dpsi *= min(1.0, supply / required)

    psi_next = state.psi + dpsi

    qn = q_next.copy()
    R = rot2d(dpsi)
    for i in in_contact:
        material = spec.pivot + R @ (tips0[i] - spec.pivot)
        tip_i, _ = fingertip_fk(spec, i, qn[i])
        gap = np.linalg.norm(tip_i - material)
        if 1e-11 < gap <= cfg.drop_tol:
            qn[i] = _project_to_point(spec, i, qn[i], material, cfg.resolve_iters)

    tips2, _ = fk_all(spec, qn, with_jacobian=False)
    dist2, _ = _sd_batch(spec, tips2)
    for i in range(spec.n_f):
        if dist2[i] < -cfg.contact_tol:
            qn[i] = _project_to_surface(spec, i, qn[i], cfg.resolve_iters)

    return State(qn, psi_next), {"slipped": slipped}


def detect_drop(spec: EnvSpec, cfg: SimConfig, mode: ContactMode, state: State) -> bool:
    """True when any finger that should be holding has left the surface."""
    if not mode.contact_indices:
        return False
    tips, _ = fk_all(spec, state.q, with_jacobian=False)
    dist, _ = _sd_batch(spec, tips)
    return bool(np.any(dist[list(mode.contact_indices)] > cfg.drop_tol))

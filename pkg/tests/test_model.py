"""Contact-model unit tests: FD oracles for every Jacobian, geometric
identities for kinematics/balance, stack ordering and reproducibility."""

import numpy as np
import pytest

from diskturn.model import (
    ContactMode,
    Control,
    EnvSpec,
    InputError,
    State,
    Trajectory,
    VarLayout,
    balance_residual,
    contact_residual,
    fingertip_fk,
    fk_all,
    friction_residual,
    kinematics_residual,
    signed_distance,
    stack_constraints,
)
from diskturn.util import cross2d, make_rng, rot2d


SPEC = EnvSpec()


def rand_state(rng, scale=0.8):
    q = rng.uniform(-scale, scale, size=(SPEC.n_f, SPEC.joints_per_finger))
    return State(q, rng.uniform(-np.pi, np.pi))


def rand_control(rng, n_c):
    dq = rng.uniform(-0.3, 0.3, size=(SPEC.n_f, SPEC.joints_per_finger))
    f = np.stack([rng.uniform(0.1, 2.0, n_c), rng.uniform(-1.5, 1.5, n_c)], axis=1)
    return Control(dq, f, rng.uniform(-0.2, 0.2))


def fd_jacobian(fun, x, eps=1e-6):
    """Central finite differences, column by column."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        dx = np.zeros_like(x)
        dx[j] = eps
        J[:, j] = (np.atleast_1d(fun(x + dx)) - np.atleast_1d(fun(x - dx))) / (2 * eps)
    return J


def rel_err(a, b):
    denom = max(np.linalg.norm(b), 1.0)
    return np.linalg.norm(a - b) / denom


def ik_to(target, q0, finger=0, tol=1e-13):
    """Newton IK for one fingertip; asserts convergence."""
    q = np.array(q0, dtype=float)
    for _ in range(200):
        tip, J = fingertip_fk(SPEC, finger, q)
        err = target - tip
        if np.linalg.norm(err) < tol:
            return q
        q = q + np.linalg.lstsq(J, err, rcond=None)[0]
    raise AssertionError(f"IK failed to converge, |err|={np.linalg.norm(err):.3e}")


def grasp_q(finger):
    """Closed-form two-link IK putting the fingertip on the surface point
    nearest the base (elbow-up branch)."""
    l1, l2 = SPEC.link_lengths
    d = np.linalg.norm(SPEC.finger_bases[finger] - SPEC.pivot) - SPEC.disk_radius
    c2 = (d * d - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    q2 = np.arccos(np.clip(c2, -1.0, 1.0))
    q1 = -np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.array([q1, q2])


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------


def test_fk_zero_config_points_at_pivot():
    q = np.zeros((SPEC.n_f, SPEC.joints_per_finger))
    tips, _ = fk_all(SPEC, q)
    reach = SPEC.link_lengths.sum()
    for i in range(SPEC.n_f):
        d = SPEC.pivot - SPEC.finger_bases[i]
        expect = SPEC.finger_bases[i] + reach * d / np.linalg.norm(d)
        assert np.allclose(tips[i], expect, atol=1e-12)


def test_fk_jacobian_fd():
    rng = make_rng(101)
    for _ in range(20):
        q = rng.uniform(-1.5, 1.5, size=(SPEC.n_f, SPEC.joints_per_finger))
        tips, jac = fk_all(SPEC, q)
        for i in range(SPEC.n_f):
            Jfd = fd_jacobian(lambda qi: fingertip_fk(SPEC, i, qi)[0], q[i])
            assert rel_err(jac[i], Jfd) < 1e-7


def test_fk_batched_matches_single():
    rng = make_rng(102)
    q = rng.uniform(-1.0, 1.0, size=(4, 5, SPEC.n_f, SPEC.joints_per_finger))
    tips, jac = fk_all(SPEC, q)
    for a in range(4):
        for b in range(5):
            for i in range(SPEC.n_f):
                tip_s, jac_s = fingertip_fk(SPEC, i, q[a, b, i])
                assert np.array_equal(tips[a, b, i], tip_s)
                assert np.array_equal(jac[a, b, i], jac_s)


def test_fk_rejects_bad_shape():
    with pytest.raises(InputError):
        fk_all(SPEC, np.zeros((2, 2)))
    with pytest.raises(InputError):
        fingertip_fk(SPEC, 0, np.zeros(3))
    with pytest.raises(InputError):
        fingertip_fk(SPEC, 7, np.zeros(2))


# ---------------------------------------------------------------------------
# signed distance
# ---------------------------------------------------------------------------


def test_signed_distance_values():
    # on-axis points: outside, on-surface, inside
    sd = signed_distance(SPEC, np.array([2.0, 0.0]))
    assert abs(sd.dist - 1.0) < 1e-12 and not sd.degenerate
    sd = signed_distance(SPEC, np.array([0.0, 1.0]))
    assert abs(sd.dist) < 1e-12
    sd = signed_distance(SPEC, np.array([0.5, 0.0]))
    assert abs(sd.dist + 0.5) < 1e-12
    assert np.allclose(sd.grad, [1.0, 0.0])


def test_signed_distance_degenerate_center():
    sd = signed_distance(SPEC, SPEC.pivot.copy())
    assert sd.degenerate
    assert sd.dist == -SPEC.disk_radius
    assert np.array_equal(sd.grad, np.zeros(2))


def test_signed_distance_grad_fd():
    rng = make_rng(103)
    for _ in range(50):
        p = rng.uniform(-3, 3, 2)
        if np.linalg.norm(p) < 1e-3:
            continue
        sd = signed_distance(SPEC, p)
        g_fd = fd_jacobian(lambda x: signed_distance(SPEC, x).dist, p)[0]
        assert rel_err(sd.grad, g_fd) < 1e-8


# ---------------------------------------------------------------------------
# residual families against finite differences
# ---------------------------------------------------------------------------

MODES = [ContactMode((1, 1, 1)), ContactMode((1, 0, 0)), ContactMode((0, 1, 1))]


def test_contact_residual_fd():
    rng = make_rng(104)
    for mode in MODES:
        for _ in range(10):
            s = rand_state(rng)
            res, jac = contact_residual(SPEC, mode, s)
            assert res.shape == (mode.n_contact,)

            def f(x):
                st = State(x[:-1].reshape(SPEC.n_f, -1), x[-1])
                return contact_residual(SPEC, mode, st)[0]

            assert rel_err(jac, fd_jacobian(f, s.flat())) < 1e-6


def test_kinematics_residual_fd():
    rng = make_rng(105)
    for mode in MODES:
        for _ in range(10):
            s0, s1 = rand_state(rng), rand_state(rng)
            res, Jt, Jt1 = kinematics_residual(SPEC, mode, s0, s1)
            assert res.shape == (2 * mode.n_contact,)

            def f_cur(x):
                st = State(x[:-1].reshape(SPEC.n_f, -1), x[-1])
                return kinematics_residual(SPEC, mode, st, s1)[0]

            def f_next(x):
                st = State(x[:-1].reshape(SPEC.n_f, -1), x[-1])
                return kinematics_residual(SPEC, mode, s0, st)[0]

            assert rel_err(Jt, fd_jacobian(f_cur, s0.flat())) < 1e-6
            assert rel_err(Jt1, fd_jacobian(f_next, s1.flat())) < 1e-6


def test_kinematics_chord_magnitude():
    """A fingertip that stays put while the disk turns 0.1 rad at radius 1
    violates sticking by the chord length 2 sin(0.05)."""
    mode = ContactMode((1, 0, 0))
    q = np.zeros((SPEC.n_f, SPEC.joints_per_finger))
    q[0] = grasp_q(0)
    s0 = State(q, 0.3)
    s1 = State(q.copy(), 0.4)
    res, _, _ = kinematics_residual(SPEC, mode, s0, s1)
    assert abs(np.linalg.norm(res) - 2.0 * np.sin(0.05)) < 1e-9


def test_kinematics_zero_for_tracking_tip():
    """Moving the tip to the rotated material point zeroes the residual."""
    mode = ContactMode((1, 0, 0))
    q0 = np.zeros((SPEC.n_f, SPEC.joints_per_finger))
    q0[0] = grasp_q(0)
    tip0, _ = fingertip_fk(SPEC, 0, q0[0])
    dpsi = 0.07
    target = SPEC.pivot + rot2d(dpsi) @ (tip0 - SPEC.pivot)
    q1 = q0.copy()
    q1[0] = ik_to(target, q0[0])
    res, _, _ = kinematics_residual(SPEC, mode, State(q0, 0.0), State(q1, dpsi))
    assert np.linalg.norm(res) < 1e-11


def test_balance_matches_cross_product():
    """Balance row equals the torque of the world-frame contact forces."""
    rng = make_rng(106)
    mode = ContactMode((1, 1, 1))
    for _ in range(50):
        s = rand_state(rng)
        c = rand_control(rng, 3)
        res, grad = balance_residual(SPEC, mode, s, s, c)
        # place material points anywhere on the surface: torque only depends
        # on the tangential components
        tau = 0.0
        for ci in range(3):
            ang = rng.uniform(0, 2 * np.pi)
            rhat = np.array([np.cos(ang), np.sin(ang)])
            that = np.array([-rhat[1], rhat[0]])
            p = SPEC.pivot + SPEC.disk_radius * rhat
            force = -c.f[ci, 0] * rhat + c.f[ci, 1] * that
            tau += cross2d(p - SPEC.pivot, force)
        assert abs(res - (tau + c.tau_e)) < 1e-12
        # gradient against FD over the flattened control
        def f(x):
            nq = SPEC.n_f * SPEC.joints_per_finger
            ctl = Control(x[:nq].reshape(SPEC.n_f, -1), x[nq:-1].reshape(-1, 2), x[-1])
            return balance_residual(SPEC, mode, s, s, ctl)[0]

        x0 = np.concatenate([c.dq.ravel(), c.f.ravel(), [c.tau_e]])
        assert rel_err(grad, fd_jacobian(f, x0)[0]) < 1e-9


def test_friction_rows_equal_cone_membership():
    """Three linear rows <= 0 exactly when f_n >= 0 and |f_t| <= mu f_n."""
    rng = make_rng(107)
    mode = ContactMode((1, 1, 0))
    s = rand_state(rng)
    fn = rng.uniform(-1.0, 3.0, 10000)
    ft = rng.uniform(-3.0, 3.0, 10000)
    for k in range(10000):
        c = Control(np.zeros((3, 2)), np.array([[fn[k], ft[k]], [1.0, 0.0]]), 0.0)
        rows, _ = friction_residual(SPEC, mode, s, c)
        inside = fn[k] >= 0 and abs(ft[k]) <= SPEC.mu * fn[k]
        assert (np.all(rows[:3] <= 0)) == inside


def test_friction_jacobian_fd():
    rng = make_rng(108)
    mode = ContactMode((1, 1, 1))
    s = rand_state(rng)
    c = rand_control(rng, 3)

    def f(x):
        nq = SPEC.n_f * SPEC.joints_per_finger
        ctl = Control(x[:nq].reshape(SPEC.n_f, -1), x[nq:-1].reshape(-1, 2), x[-1])
        return friction_residual(SPEC, mode, s, ctl)[0]

    x0 = np.concatenate([c.dq.ravel(), c.f.ravel(), [c.tau_e]])
    _, jac = friction_residual(SPEC, mode, s, c)
    assert rel_err(jac, fd_jacobian(f, x0)) < 1e-9


# ---------------------------------------------------------------------------
# spec round trips and validation
# ---------------------------------------------------------------------------


def test_envspec_json_round_trip():
    doc = SPEC.to_json()
    back = EnvSpec.from_json(doc)
    assert back.to_json() == doc


def test_envspec_rejects_bad_values():
    with pytest.raises(InputError):
        EnvSpec(disk_radius=-1.0)
    with pytest.raises(InputError):
        EnvSpec(mu=0.0)
    with pytest.raises(InputError):
        EnvSpec(q_min=1.0, q_max=-1.0)
    with pytest.raises(InputError):
        EnvSpec(finger_bases=np.array([[0.5, 0.0], [0.0, 2.0], [0.0, -2.0]]))


def test_contact_mode_validation():
    m = ContactMode((1, 0, 1))
    assert m.contact_indices == (0, 2)
    assert m.regrasp_indices == (1,)
    assert m.key() == "101"
    with pytest.raises(InputError):
        ContactMode((1, 2, 0))


# ---------------------------------------------------------------------------
# layout and stacked system
# ---------------------------------------------------------------------------


def rand_traj(rng, mode, H):
    states = [rand_state(rng)]
    controls = []
    for _ in range(H):
        states.append(rand_state(rng))
        controls.append(rand_control(rng, mode.n_contact))
    return Trajectory(states, controls, mode)


def test_pack_unpack_round_trip():
    rng = make_rng(109)
    for mode in MODES:
        traj = rand_traj(rng, mode, 5)
        lay = VarLayout(SPEC, mode, 5)
        z = lay.pack(traj)
        assert z.shape == (lay.dim,)
        back = lay.unpack(z, traj.states[0])
        assert np.array_equal(back.q_array(), traj.q_array())
        assert np.array_equal(back.psi_array(), traj.psi_array())
        assert np.array_equal(back.dq_array(), traj.dq_array())
        assert np.array_equal(back.f_array(), traj.f_array())
        assert np.array_equal(back.tau_array(), traj.tau_array())
        arrs = lay.arrays(z[None], traj.states[0])
        assert np.allclose(arrs["q"][0], traj.q_array())
        assert np.allclose(arrs["psi"][0], traj.psi_array())


def test_bounds_vector():
    lay = VarLayout(SPEC, ContactMode((1, 1, 0)), 3)
    lo, hi = lay.bounds()
    assert lo.shape == hi.shape == (lay.dim,)
    assert np.isinf(lo[lay.col_psi(1)]) and np.isinf(hi[lay.col_psi(2)])
    assert hi[lay.col_q(1)][0] == SPEC.q_max
    fsl = lay.col_f(0)
    assert lo[fsl.start] == 0.0  # normal force pushes only
    assert hi[fsl.start + 1] == SPEC.u_max.f_t
    assert lo[lay.col_tau(2)] == -SPEC.u_max.tau_e


def test_stack_shapes_and_labels():
    rng = make_rng(110)
    H = 4
    for mode in MODES:
        traj = rand_traj(rng, mode, H)
        st = stack_constraints(SPEC, mode, traj)
        n_c, n_r = mode.n_contact, len(mode.regrasp_indices)
        nq = SPEC.n_f * SPEC.joints_per_finger
        kin_rows = 2 * n_c * H if n_c else H
        assert st.h.shape[0] == H * n_c + kin_rows + H + n_r + H * nq
        assert st.g.shape[0] == 3 * n_c * H + (H - 1) * n_r + 2 * H * nq + 2 * H * (
            nq + 2 * n_c + 1
        )
        assert len(st.h_labels) == st.h.shape[0]
        assert len(st.g_labels) == st.g.shape[0]
        assert st.Jh.shape == (st.h.shape[0], H * (nq + 1) + H * (nq + 2 * n_c + 1))
        # documented family order
        fams = []
        for lab in st.h_labels:
            fam = lab.split("[")[0]
            if not fams or fams[-1] != fam:
                fams.append(fam)
        expect = ["contact", "kinematics", "balance"]
        if n_r:
            expect.append("terminal_contact")
        expect.append("consistency")
        if n_c == 0:
            expect.remove("contact")
        assert fams == expect


def test_stack_all_contact_has_no_regrasp_rows():
    rng = make_rng(111)
    traj = rand_traj(rng, ContactMode((1, 1, 1)), 3)
    st = stack_constraints(SPEC, ContactMode((1, 1, 1)), traj)
    assert not any("terminal" in l or "clearance" in l for l in st.h_labels + st.g_labels)


def test_stack_no_contact_freezes_disk():
    rng = make_rng(112)
    mode = ContactMode((0, 0, 0))
    traj = rand_traj(rng, mode, 3)
    st = stack_constraints(SPEC, mode, traj)
    freeze = [l for l in st.h_labels if "freeze" in l]
    assert len(freeze) == 3
    # rows equal successive psi differences
    psis = traj.psi_array()
    rows = [i for i, l in enumerate(st.h_labels) if "freeze" in l]
    assert np.allclose(st.h[rows], np.diff(psis))


def test_stack_jacobians_fd():
    rng = make_rng(113)
    for mode in MODES + [ContactMode((0, 0, 0))]:
        traj = rand_traj(rng, mode, 3)
        lay = VarLayout(SPEC, mode, 3)
        z0 = lay.pack(traj)
        s0 = traj.states[0]

        def h_of(z):
            return stack_constraints(SPEC, mode, lay.unpack(z, s0)).h

        def g_of(z):
            return stack_constraints(SPEC, mode, lay.unpack(z, s0)).g

        st = stack_constraints(SPEC, mode, traj)
        assert rel_err(st.Jh, fd_jacobian(h_of, z0)) < 1e-6
        assert rel_err(st.Jg, fd_jacobian(g_of, z0)) < 1e-6


def test_stack_bit_reproducible():
    rng = make_rng(114)
    traj = rand_traj(rng, MODES[1], 4)
    a = stack_constraints(SPEC, MODES[1], traj)
    b = stack_constraints(SPEC, MODES[1], traj)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.g, b.g)
    assert np.array_equal(a.Jh, b.Jh) and np.array_equal(a.Jg, b.Jg)
    assert a.h_labels == b.h_labels and a.g_labels == b.g_labels


def test_feasible_sticking_rotation_has_tiny_residual():
    """Hand-built turn: tips track rotating material points via IK, forces
    split the torque evenly. Every equality should vanish to solver precision
    and every inequality should hold."""
    mode = ContactMode((1, 1, 1))
    H = 5
    dpsi = -0.06
    tau_e = 0.15
    q = np.stack([grasp_q(i) for i in range(SPEC.n_f)])
    tips0, _ = fk_all(SPEC, q, with_jacobian=False)
    states = [State(q, 1.0)]
    controls = []
    ft_each = -tau_e / (SPEC.disk_radius * SPEC.n_f)
    for t in range(1, H + 1):
        qn = states[-1].q.copy()
        for i in range(SPEC.n_f):
            target = SPEC.pivot + rot2d(t * dpsi) @ (tips0[i] - SPEC.pivot)
            qn[i] = ik_to(target, qn[i], finger=i)
        dq = qn - states[-1].q
        f = np.stack([np.full(SPEC.n_f, 1.0), np.full(SPEC.n_f, ft_each)], axis=1)
        controls.append(Control(dq, f, tau_e))
        states.append(State(qn, states[-1].psi + dpsi))
    traj = Trajectory(states, controls, mode)
    st = stack_constraints(SPEC, mode, traj)
    assert np.max(np.abs(st.h)) < 1e-9
    assert np.max(st.g) <= 1e-12

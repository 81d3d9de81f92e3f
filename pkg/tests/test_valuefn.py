"""Value-ensemble tests: forward/gradient oracles, encoding, training
behavior, stats formulas, serialization round trips."""

from dataclasses import dataclass

import numpy as np
import pytest

from diskturn.model import ContactMode, Control, InputError, State, Trajectory
from diskturn.sim import default_grasp_state
from diskturn.model import EnvSpec
from diskturn.util import make_rng, wrap_to_pi
from diskturn.valuefn import (
    MLP,
    NetSpec,
    TrainConfig,
    TrainingError,
    ValueEnsemble,
    encode_input,
    ensemble_stats,
    forward,
    input_grad,
    load_ensemble,
    predict_clipped,
    predict_with_grads,
    save_ensemble,
    train,
    write_loss_curve,
)

SPEC = EnvSpec()
TURN = ContactMode((1, 1, 1))


@dataclass
class FakeSample:
    tau: Trajectory
    zeta: object
    rho: float


def make_traj(rng, H=4, psi=None, q_center=None, q_spread=0.8):
    states = []
    for _ in range(H + 1):
        q = (q_center if q_center is not None else 0.0) + rng.uniform(
            -q_spread, q_spread, (3, 2)
        )
        states.append(State(q, psi if psi is not None else rng.uniform(0, 2 * np.pi)))
    controls = [Control(np.zeros((3, 2)), np.zeros((3, 2)), 0.0) for _ in range(H)]
    return Trajectory(states, controls, TURN)


def rand_member(rng, d, h):
    return MLP(
        rng.normal(size=(h, d)), rng.normal(size=h), rng.normal(size=h), rng.normal()
    )


# ---------------------------------------------------------------------------
# forward / input_grad
# ---------------------------------------------------------------------------


def test_forward_constant_net():
    m = MLP(np.zeros((4, 3)), np.zeros(4), np.zeros(4), 0.7)
    assert forward(m, np.zeros(3)) == 0.7
    assert forward(m, np.ones(3) * 5) == 0.7
    assert np.array_equal(forward(m, np.zeros((10, 3))), np.full(10, 0.7))


def test_forward_hand_computed_1_1_1():
    m = MLP(np.array([[1.0]]), np.array([0.0]), np.array([2.0]), 0.0)
    out = forward(m, np.array([0.5]))
    assert abs(out - 2.0 * np.tanh(0.5)) < 1e-15
    assert abs(out - 0.92423) < 1e-4
    g = input_grad(m, np.array([0.5]))
    assert abs(g[0] - 2.0 * (1.0 - np.tanh(0.5) ** 2)) < 1e-15


def test_forward_bounded_under_saturation():
    rng = make_rng(200)
    m = rand_member(rng, 6, 8)
    for scale in (1.0, 100.0, 1e3):
        out = forward(m, rng.normal(size=6) * scale)
        assert np.isfinite(out)
        assert abs(out) <= np.abs(m.w2).sum() + abs(m.b2) + 1e-12


def test_input_grad_fd_oracle():
    rng = make_rng(201)
    for _ in range(100):
        d = int(rng.integers(2, 12))
        h = int(rng.integers(2, 40))
        m = rand_member(rng, d, h)
        x = rng.normal(size=d)
        g = input_grad(m, x)
        g_fd = np.zeros(d)
        for j in range(d):
            dx = np.zeros(d)
            dx[j] = 1e-6
            g_fd[j] = (forward(m, x + dx) - forward(m, x - dx)) / 2e-6
        assert np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1.0) < 1e-6


def test_zero_weight_net_zero_grad():
    m = MLP(np.zeros((4, 3)), np.zeros(4), np.zeros(4), 0.7)
    assert np.array_equal(input_grad(m, np.ones(3)), np.zeros(3))


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def test_encode_dims():
    s = State(np.zeros((3, 2)), 0.3)
    assert encode_input(s, 1, 0.5, 8).shape == (11,)
    assert encode_input(s, 1, None, 6).shape == (9,)


def test_encode_values():
    s = State(np.arange(6, dtype=float).reshape(3, 2), np.pi / 2)
    x = encode_input(s, 2, 0.0, 4)
    assert np.allclose(x[:6], np.arange(6))
    assert abs(x[6] - 1.0) < 1e-12 and abs(x[7]) < 1e-12  # sin/cos psi
    assert x[8] == 0.5  # t/H
    assert x[9] == 0.0 and x[10] == 1.0  # sin/cos zeta


def test_encode_time_bounds():
    s = State(np.zeros((3, 2)), 0.0)
    with pytest.raises(InputError):
        encode_input(s, 0, None, 4)
    with pytest.raises(InputError):
        encode_input(s, 5, None, 4)


def test_encode_norm_identity():
    s = State(np.ones((3, 2)), 1.1)
    raw = encode_input(s, 3, None, 4)
    z = encode_input(s, 3, None, 4, norm=(raw, np.ones_like(raw)))
    assert np.array_equal(z, np.zeros_like(raw))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def small_cfg(**kw):
    base = dict(lr=3e-3, batch_size=64, epochs=80, val_fraction=0.1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_train_constant_labels():
    rng = make_rng(202)
    data = [FakeSample(make_traj(rng), 0.7, 0.8) for _ in range(120)]
    ens = train(data, NetSpec(11, 16), small_cfg(epochs=300), n_members=4,
                contact_mode="111")
    val = np.asarray(ens.history["val_mse"])[-1]
    assert np.all(val <= 1e-4)
    assert ens.zeta_spec == "sincos_angle"


def test_train_learns_angle_target():
    """Labels depend on the encoded disk angle; validation MSE should drop by
    at least half within the epoch budget."""
    rng = make_rng(203)
    data = []
    for _ in range(200):
        phi = rng.uniform(0, 2 * np.pi)
        rho = min(wrap_to_pi(phi - 1.0) ** 2, 5.0)
        data.append(FakeSample(make_traj(rng, psi=phi), None, float(rho)))
    ens = train(data, NetSpec(9, 24), small_cfg(epochs=200), n_members=3)
    val = np.asarray(ens.history["val_mse"]).mean(axis=1)
    assert val[-1] <= 0.5 * val[0]


def test_train_deterministic_and_distinct():
    rng = make_rng(204)
    data = [FakeSample(make_traj(rng), None, float(k % 3)) for k in range(80)]
    cfg = small_cfg(epochs=10)
    a = train(data, NetSpec(9, 8), cfg, n_members=4)
    b = train(data, NetSpec(9, 8), cfg, n_members=4)
    for ma, mb in zip(a.members, b.members):
        assert np.array_equal(ma.W1, mb.W1) and ma.b2 == mb.b2
    for i in range(4):
        for j in range(i + 1, 4):
            diff = np.linalg.norm(a.members[i].W1 - a.members[j].W1)
            assert diff > 0.0


def test_train_rejects_bad_input():
    rng = make_rng(205)
    with pytest.raises(InputError):
        train([], NetSpec(9, 8), small_cfg(), n_members=2)
    data = [FakeSample(make_traj(rng), None, 9.0)] * 40
    with pytest.raises(InputError):
        train(data, NetSpec(9, 8), small_cfg(), n_members=2)  # label > rho_max
    data = [FakeSample(make_traj(rng), None, 1.0)] * 40
    with pytest.raises(InputError):
        train(data, NetSpec(11, 8), small_cfg(), n_members=2)  # dim mismatch


def test_train_nan_label_aborts_with_diagnostics():
    rng = make_rng(206)
    data = [FakeSample(make_traj(rng), None, 1.0) for _ in range(79)]
    data.append(FakeSample(make_traj(rng), None, float("nan")))
    with pytest.raises(TrainingError, match="epoch"):
        train(data, NetSpec(9, 8), small_cfg(epochs=3), n_members=2)


def test_ood_variance_exceeds_train_variance():
    """Joints shifted +1.0 rad off the training distribution must look more
    uncertain to the ensemble than training inputs do."""
    rng = make_rng(207)
    grasp = default_grasp_state(SPEC).q
    data = []
    for _ in range(150):
        tau = make_traj(rng, q_center=grasp, q_spread=0.05)
        data.append(FakeSample(tau, None, float(rng.uniform(0, 2))))
    ens = train(data, NetSpec(9, 16), small_cfg(epochs=60), n_members=8)
    X = np.stack(
        [
            encode_input(s.tau.states[t], t, None, s.tau.horizon)
            for s in data[:50]
            for t in range(1, 5)
        ]
    )
    X_ood = X.copy()
    X_ood[:, :6] += 1.0
    var_in = predict_clipped(ens, X).var(axis=1).mean()
    var_out = predict_clipped(ens, X_ood).var(axis=1).mean()
    assert var_out > var_in


# ---------------------------------------------------------------------------
# ensemble stats
# ---------------------------------------------------------------------------


def const_ensemble(values, d=9):
    members = [MLP(np.zeros((2, d)), np.zeros(2), np.zeros(2), v) for v in values]
    return ValueEnsemble(NetSpec(d, 2), members, np.zeros(d), np.ones(d))


def test_stats_hand_case():
    rng = make_rng(208)
    ens = const_ensemble([1.0, 3.0])
    tau = make_traj(rng, H=1)
    mu, sigma2, V = ensemble_stats(ens, tau, None)
    assert mu == 2.0 and sigma2 == 1.0
    assert V.shape == (1, 2) and np.array_equal(V, [[1.0, 3.0]])


def test_stats_single_member_zero_variance():
    rng = make_rng(209)
    ens = const_ensemble([2.2])
    _, sigma2, _ = ensemble_stats(ens, make_traj(rng, H=5), None)
    assert sigma2 == 0.0


def test_stats_enumeration_oracle():
    rng = make_rng(210)
    members = [rand_member(rng, 9, 12) for _ in range(5)]
    ens = ValueEnsemble(NetSpec(9, 12), members, rng.normal(size=9),
                        rng.uniform(0.5, 2.0, 9))
    tau = make_traj(rng, H=6)
    mu, sigma2, V = ensemble_stats(ens, tau, None)
    # direct enumeration, member by member, state by state
    M, H = 5, 6
    Vo = np.zeros((H, M))
    for t in range(1, H + 1):
        x = encode_input(tau.states[t], t, None, H,
                         norm=(ens.norm_mean, ens.norm_std))
        for i in range(M):
            Vo[t - 1, i] = np.clip(forward(members[i], x), 0.0, ens.rho_max)
    mu_o = Vo.sum() / M
    sigma2_o = ((Vo - Vo.mean(axis=1, keepdims=True)) ** 2).sum() / M
    assert abs(mu - mu_o) <= 1e-12
    assert abs(sigma2 - sigma2_o) <= 1e-12
    assert np.allclose(V, Vo, atol=1e-12)
    assert sigma2 >= 0.0


def test_predict_grads_fd_and_clipping():
    rng = make_rng(211)
    members = [rand_member(rng, 7, 10) for _ in range(3)]
    ens = ValueEnsemble(NetSpec(7, 10), members, rng.normal(size=7),
                        rng.uniform(0.5, 2.0, 7))
    X = rng.normal(size=(4, 7))
    vals, grads = predict_with_grads(ens, X)
    for n in range(4):
        for m in range(3):
            g_fd = np.zeros(7)
            for j in range(7):
                dx = np.zeros(7)
                dx[j] = 1e-6
                up = predict_clipped(ens, (X[n] + dx)[None])[0, m]
                dn = predict_clipped(ens, (X[n] - dx)[None])[0, m]
                g_fd[j] = (up - dn) / 2e-6
            denom = max(np.linalg.norm(g_fd), 1.0)
            assert np.linalg.norm(grads[n, m] - g_fd) / denom < 1e-5
    # saturated member: clipped everywhere, zero gradient
    sat = ValueEnsemble(NetSpec(7, 10),
                        [MLP(np.zeros((10, 7)), np.zeros(10), np.zeros(10), 10.0)],
                        np.zeros(7), np.ones(7))
    v, g = predict_with_grads(sat, X)
    assert np.all(v == sat.rho_max)
    assert np.array_equal(g, np.zeros_like(g))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    rng = make_rng(212)
    members = [rand_member(rng, 11, 32) for _ in range(4)]
    ens = ValueEnsemble(NetSpec(11, 32), members, rng.normal(size=11),
                        rng.uniform(0.5, 2.0, 11), contact_mode="111",
                        zeta_spec="sincos_angle")
    path = tmp_path / "ens.json"
    save_ensemble(ens, path)
    back = load_ensemble(path)
    X = rng.normal(size=(100, 11))
    assert np.array_equal(predict_clipped(ens, X), predict_clipped(back, X))
    tau = make_traj(rng, H=3)
    assert ensemble_stats(ens, tau, 0.3)[:2] == ensemble_stats(back, tau, 0.3)[:2]
    assert back.contact_mode == "111" and back.n_members == 4


def test_load_rejects_truncated_and_wrong_schema(tmp_path):
    rng = make_rng(213)
    ens = const_ensemble([1.0, 2.0])
    path = tmp_path / "ens.json"
    save_ensemble(ens, path)
    raw = path.read_text()
    (tmp_path / "trunc.json").write_text(raw[: len(raw) // 2])
    with pytest.raises(InputError):
        load_ensemble(tmp_path / "trunc.json")
    bad = raw.replace("diskturn-ensemble-v1", "other-schema-v9")
    (tmp_path / "bad.json").write_text(bad)
    with pytest.raises(InputError):
        load_ensemble(tmp_path / "bad.json")


def test_loss_curve_csv(tmp_path):
    rng = make_rng(214)
    data = [FakeSample(make_traj(rng), None, 1.0) for _ in range(80)]
    ens = train(data, NetSpec(9, 8), small_cfg(epochs=5), n_members=2)
    path = tmp_path / "curve.csv"
    write_loss_curve(ens, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "epoch,train_mse,val_mse"
    assert len(lines) == 7  # header + epoch 0 snapshot + 5 epochs

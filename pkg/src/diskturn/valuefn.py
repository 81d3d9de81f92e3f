"""Value-function ensemble: tiny single-hidden-layer tanh networks trained to
predict the final task cost from (state, time index, auxiliary inputs).

Members differ only in weight initialization; epistemic uncertainty is the
ensemble variance. Inference clips predictions to [0, rho_max] with zero
gradient in the clipped region, mirroring the label ceiling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import InputError, State, Trajectory
from .util import make_rng

ENSEMBLE_SCHEMA = "diskturn-ensemble-v1"
RHO_MAX = 5.0


class TrainingError(RuntimeError):
    """Raised when training produces non-finite losses."""


@dataclass
class NetSpec:
    """Single-hidden-layer tanh regressor shape."""

    input_dim: int
    hidden_dim: int
    activation: str = "tanh"
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0 or self.output_dim != 1:
            raise InputError("net dims must be positive with scalar output")
        if self.activation != "tanh":
            raise InputError("only tanh hidden activation is supported")


@dataclass
class MLP:
    """One ensemble member: out = w2 . tanh(W1 x + b1) + b2."""

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.w2 = np.asarray(self.w2, dtype=float)
        self.b2 = float(self.b2)


def forward(member: MLP, x: np.ndarray):
    """Network output; x may be a single vector or a batch (N, d)."""
    x = np.asarray(x, dtype=float)
    a = np.tanh(x @ member.W1.T + member.b1)
    return a @ member.w2 + member.b2


def input_grad(member: MLP, x: np.ndarray):
    """Exact gradient of forward w.r.t. x (chain rule through tanh)."""
    x = np.asarray(x, dtype=float)
    a = np.tanh(x @ member.W1.T + member.b1)
    return ((1.0 - a * a) * member.w2) @ member.W1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 300
    val_fraction: float = 0.1
    betas: tuple = (0.9, 0.999)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise InputError("val_fraction must lie in (0, 1)")
        self.betas = tuple(self.betas)

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "val_fraction": self.val_fraction,
            "betas": list(self.betas),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass
class ValueEnsemble:
    net_spec: NetSpec
    members: list
    norm_mean: np.ndarray
    norm_std: np.ndarray
    contact_mode: str = ""
    zeta_spec: str = "none"
    rho_max: float = RHO_MAX
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.members) < 1:
            raise InputError("ensemble needs at least one member")
        self.norm_mean = np.asarray(self.norm_mean, dtype=float)
        self.norm_std = np.asarray(self.norm_std, dtype=float)
        if self.norm_mean.shape != (self.net_spec.input_dim,):
            raise InputError("norm vectors must match input_dim")

    @property
    def n_members(self) -> int:
        return len(self.members)

    def first_member_only(self) -> "ValueEnsemble":
        """Degenerate single-network view (shared norm, zero variance)."""
        return ValueEnsemble(
            self.net_spec,
            [self.members[0]],
            self.norm_mean,
            self.norm_std,
            self.contact_mode,
            self.zeta_spec,
            self.rho_max,
        )


def encode_input(state: State, t: int, zeta, horizon: int, norm=None) -> np.ndarray:
    """Feature vector [q..., sin psi, cos psi, t/H, (sin zeta, cos zeta)].

    zeta is the sub-task's auxiliary scalar angle (the disk angle at the
    sub-task's first state) or None when the sub-task carries no auxiliary
    input. Pass norm=(mean, std) to z-score.
    """
    if not 1 <= t <= horizon:
        raise InputError(f"time index {t} outside [1, {horizon}]")
    parts = [
        np.ravel(state.q),
        [np.sin(state.psi), np.cos(state.psi), t / horizon],
    ]
    if zeta is not None:
        parts.append([np.sin(zeta), np.cos(zeta)])
    x = np.concatenate([np.asarray(p, dtype=float) for p in parts])
    if norm is not None:
        mean, std = norm
        x = (x - mean) / std
    return x


def _encode_rows(samples: Sequence) -> tuple:
    """Expand (tau, zeta, rho) samples into per-timestep rows."""
    X, y, owner = [], [], []
    for k, s in enumerate(samples):
        H = s.tau.horizon
        for t in range(1, H + 1):
            X.append(encode_input(s.tau.states[t], t, s.zeta, H))
            y.append(s.rho)
            owner.append(k)
    return np.asarray(X), np.asarray(y), np.asarray(owner)


def _init_member(spec: NetSpec, rng: np.random.Generator) -> MLP:
    bw = 1.0 / np.sqrt(spec.input_dim)
    bo = 1.0 / np.sqrt(spec.hidden_dim)
    return MLP(
        rng.uniform(-bw, bw, size=(spec.hidden_dim, spec.input_dim)),
        rng.uniform(-bw, bw, size=spec.hidden_dim),
        rng.uniform(-bo, bo, size=spec.hidden_dim),
        rng.uniform(-bo, bo),
    )


def _stack_params(members):
    return (
        np.stack([m.W1 for m in members]),
        np.stack([m.b1 for m in members]),
        np.stack([m.w2 for m in members]),
        np.array([m.b2 for m in members]),
    )


def _mse_all(params, X, y):
    """Per-member mean squared error over rows; returns (M,)."""
    W1, b1, w2, b2 = params
    a = np.tanh(np.einsum("mhd,nd->mnh", W1, X) + b1[:, None, :])
    out = np.einsum("mnh,mh->mn", a, w2) + b2[:, None]
    return np.mean((out - y[None, :]) ** 2, axis=1)


def train(
    dataset: Sequence,
    net_spec: NetSpec,
    cfg: TrainConfig,
    n_members: int = 16,
    contact_mode: str = "",
    rho_max: float = RHO_MAX,
) -> ValueEnsemble:
    """Fit an ensemble on sub-task samples (objects with .tau, .zeta, .rho).

    The split is by sample (whole trajectories) so no trajectory leaks rows
    into both sides; input normalization comes from the training split only.
    Members share the mini-batch stream and differ by weight-init seed, so two
    runs with equal seeds give identical weights.
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    X, y, owner = _encode_rows(dataset)
    if X.shape[1] != net_spec.input_dim:
        raise InputError(
            f"encoded dim {X.shape[1]} does not match net input_dim {net_spec.input_dim}"
        )
    if np.any(y < 0.0) or np.any(y > rho_max):
        raise InputError("labels must lie in [0, rho_max]")

    split_rng = make_rng(cfg.seed, 0)
    perm = split_rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
    if n_val >= len(dataset):
        raise InputError("dataset too small for the validation split")
    val_ids = set(perm[:n_val].tolist())
    val_rows = np.isin(owner, list(val_ids))
    Xtr, ytr = X[~val_rows], y[~val_rows]
    Xva, yva = X[val_rows], y[val_rows]
    if len(ytr) < cfg.batch_size:
        raise InputError("training split smaller than one batch")

    mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    Xtr = (Xtr - mean) / std
    Xva = (Xva - mean) / std

    members = [_init_member(net_spec, make_rng(cfg.seed, 1, m)) for m in range(n_members)]
    W1, b1, w2, b2 = _stack_params(members)
    moments = [
        (np.zeros_like(p), np.zeros_like(p)) for p in (W1, b1, w2, b2)
    ]
    beta1, beta2 = cfg.betas
    eps = 1e-8
    step = 0
    batch_rng = make_rng(cfg.seed, 2)
    hist_train = [_mse_all((W1, b1, w2, b2), Xtr, ytr)]
    hist_val = [_mse_all((W1, b1, w2, b2), Xva, yva)]

    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(ytr))
        for lo in range(0, len(ytr), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            Xb, yb = Xtr[idx], ytr[idx]
            step += 1
            a = np.tanh(np.einsum("mhd,nd->mnh", W1, Xb) + b1[:, None, :])
            out = np.einsum("mnh,mh->mn", a, w2) + b2[:, None]
            dout = 2.0 * (out - yb[None, :]) / len(yb)
            gw2 = np.einsum("mn,mnh->mh", dout, a)
            gb2 = dout.sum(axis=1)
            dpre = dout[:, :, None] * w2[:, None, :] * (1.0 - a * a)
            gW1 = np.einsum("mnh,nd->mhd", dpre, Xb)
            gb1 = dpre.sum(axis=1)
            params = [W1, b1, w2, b2]
            grads = [gW1, gb1, gw2, gb2]
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for pi in range(4):
                m1, m2 = moments[pi]
                m1 *= beta1
                m1 += (1.0 - beta1) * grads[pi]
                m2 *= beta2
                m2 += (1.0 - beta2) * grads[pi] ** 2
                params[pi] -= cfg.lr * (m1 / corr1) / (np.sqrt(m2 / corr2) + eps)
            W1, b1, w2, b2 = params
        tr = _mse_all((W1, b1, w2, b2), Xtr, ytr)
        va = _mse_all((W1, b1, w2, b2), Xva, yva)
        if not (np.all(np.isfinite(tr)) and np.all(np.isfinite(va))):
            bad = int(np.argmax(~np.isfinite(tr + va)))
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (member {bad}); "
                f"lr={cfg.lr}, batch={cfg.batch_size}"
            )
        hist_train.append(tr)
        hist_val.append(va)

    members = [MLP(W1[m], b1[m], w2[m], b2[m]) for m in range(n_members)]
    zeta_spec = "sincos_angle" if dataset[0].zeta is not None else "none"
    return ValueEnsemble(
        net_spec,
        members,
        mean,
        std,
        contact_mode=contact_mode,
        zeta_spec=zeta_spec,
        rho_max=rho_max,
        history={
            "train_mse": np.stack(hist_train).tolist(),
            "val_mse": np.stack(hist_val).tolist(),
        },
    )


def write_loss_curve(ensemble: ValueEnsemble, path) -> None:
    """CSV (epoch, train_mse, val_mse) of the ensemble-mean learning curve."""
    tr = np.asarray(ensemble.history["train_mse"]).mean(axis=1)
    va = np.asarray(ensemble.history["val_mse"]).mean(axis=1)
    with open(path, "w") as fh:
        fh.write("epoch,train_mse,val_mse\n")
        for e in range(len(tr)):
            fh.write(f"{e},{tr[e]!r},{va[e]!r}\n")


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


class _Packed:
    """Flattened ensemble weights with the input z-scoring folded in, plus
    reusable scratch buffers for the solver hot path.

    W1n x_raw + b1n equals W1 ((x_raw - mean)/std) + b1, so inference works
    directly on raw feature rows. Scratch arrays are keyed by row count;
    without them the large per-iteration temporaries bounce on the
    allocator's mmap path and page faults dominate the evaluation cost.
    """

    __slots__ = ("W1n", "W1nT", "b1n", "w2cat", "b2", "M", "h", "_scratch")

    def __init__(self, ensemble: ValueEnsemble):
        W1, b1, w2, b2 = _stack_params(ensemble.members)
        M, h, d = W1.shape
        W1n = (W1 / ensemble.norm_std).reshape(M * h, d)
        self.W1n = W1n
        self.W1nT = np.ascontiguousarray(W1n.T)
        self.b1n = (b1 - W1n.reshape(M, h, d) @ ensemble.norm_mean).reshape(
            M * h
        )
        self.w2cat = w2.reshape(M * h)
        self.b2 = b2
        self.M = M
        self.h = h
        self._scratch = {}

    def scratch(self, n: int, d: int) -> dict:
        ws = self._scratch.get(n)
        if ws is None:
            M, h = self.M, self.h
            ws = {
                "a": np.empty((n, M * h)),
                "t": np.empty((n, M * h)),
                "out": np.empty((n, M)),
                "vals": np.empty((n, M)),
                "cen": np.empty((n, M)),
                "coef": np.empty((n, M)),
                "act": np.empty((n, M), dtype=bool),
                "mu": np.empty((n, 1)),
                "var": np.empty(n),
                "gx": np.empty((n, d)),
            }
            self._scratch[n] = ws
        return ws


def _packed(ensemble: ValueEnsemble) -> _Packed:
    """Cached _Packed view of the ensemble (members are treated as immutable
    after construction)."""
    cached = getattr(ensemble, "_packed_cache", None)
    if cached is None:
        cached = _Packed(ensemble)
        object.__setattr__(ensemble, "_packed_cache", cached)
    return cached


def predict_clipped(ensemble: ValueEnsemble, X_raw: np.ndarray) -> np.ndarray:
    """Member predictions for raw (un-normalized) feature rows, clipped to
    [0, rho_max]. Returns (N, M)."""
    X = np.atleast_2d(np.asarray(X_raw, dtype=float))
    p = _packed(ensemble)
    a = np.tanh(X @ p.W1nT + p.b1n)
    out = (a * p.w2cat).reshape(len(X), p.M, p.h).sum(axis=2) + p.b2
    return np.clip(out, 0.0, ensemble.rho_max)


def predict_with_grads(ensemble: ValueEnsemble, X_raw: np.ndarray):
    """Clipped predictions plus gradients w.r.t. the raw features.

    Gradients chain through the z-scoring and are zeroed wherever the clip is
    active. Returns (values (N, M), grads (N, M, d))."""
    X = np.atleast_2d(np.asarray(X_raw, dtype=float))
    p = _packed(ensemble)
    n, M, h = len(X), p.M, p.h
    a = np.tanh(X @ p.W1nT + p.b1n)  # (n, M*h)
    out = (a * p.w2cat).reshape(n, M, h).sum(axis=2) + p.b2  # (n, M)
    t = ((1.0 - a * a) * p.w2cat).reshape(n, M, h)
    grads = np.matmul(t.swapaxes(0, 1), p.W1n.reshape(M, h, -1)).swapaxes(0, 1)
    vals = np.clip(out, 0.0, ensemble.rho_max)
    # boundary members count as active, matching value_term
    grads = grads * (vals == out)[:, :, None]
    return vals, grads


def value_term(
    ensemble: ValueEnsemble, X_raw: np.ndarray, alpha: float, beta: float,
    with_grad: bool = True,
):
    """Per-row value cost alpha mu + beta sigma2 and its feature gradient.

    For each feature row: jrows = alpha sum_i V_i / M + beta sum_i
    (V_i - Vbar)^2 / M, and gx = sum_i (alpha/M + (2 beta/M)(V_i - Vbar))
    dV_i/dx. Members sitting exactly on a clip boundary count as active
    (the subgradient keeps the interior branch); strictly clipped members
    contribute zero gradient. Hot path of every solver iteration: all
    intermediates live in per-shape scratch buffers, so the returned arrays
    are only valid until the next call with this ensemble and row count.
    Callers consume them immediately. Returns (jrows (n,), gx (n, d)) with
    gx None when with_grad is false.
    """
    X = np.atleast_2d(np.asarray(X_raw, dtype=float))
    p = _packed(ensemble)
    n, d = X.shape
    M, h = p.M, p.h
    ws = p.scratch(n, d)
    a = np.matmul(X, p.W1nT, out=ws["a"])
    np.add(a, p.b1n, out=a)
    np.tanh(a, out=a)
    t = np.multiply(a, p.w2cat, out=ws["t"])
    out = np.sum(t.reshape(n, M, h), axis=2, out=ws["out"])
    np.add(out, p.b2, out=out)
    vals = np.clip(out, 0.0, ensemble.rho_max, out=ws["vals"])
    mu = np.mean(vals, axis=1, keepdims=True, out=ws["mu"])
    cen = np.subtract(vals, mu, out=ws["cen"])
    np.multiply(cen, cen, out=ws["coef"])
    jrows = np.sum(ws["coef"], axis=1, out=ws["var"])
    jrows *= beta / M
    jrows += alpha * mu[:, 0]
    if not with_grad:
        return jrows, None
    active = np.equal(vals, out, out=ws["act"])
    coef = np.multiply(cen, 2.0 * beta / M, out=ws["coef"])
    coef += alpha / M
    np.multiply(coef, active, out=coef)
    # dV_i/dpre = (1 - a^2) w2, scaled member-wise by coef, mapped back
    # through the folded first layer.
    np.multiply(a, a, out=t)
    np.subtract(1.0, t, out=t)
    np.multiply(t, p.w2cat, out=t)
    t3 = t.reshape(n, M, h)
    np.multiply(t3, coef[:, :, None], out=t3)
    gx = np.matmul(t, p.W1n, out=ws["gx"])
    return jrows, gx


def ensemble_stats(ensemble: ValueEnsemble, trajectory: Trajectory, zeta):
    """Ensemble mean and variance sums over the trajectory.

    mu = (1/M) sum_t sum_i V_i(s_t); sigma2 = (1/M) sum_t sum_i
    (V_i - mean_j V_j)^2 with the inner mean taken per state. Returns
    (mu, sigma2, V matrix of shape (H, M)) using clipped predictions.
    """
    H = trajectory.horizon
    X = np.stack(
        [
            encode_input(trajectory.states[t], t, zeta, H)
            for t in range(1, H + 1)
        ]
    )
    V = predict_clipped(ensemble, X)  # (H, M)
    M = ensemble.n_members
    mu = float(V.sum() / M)
    centered = V - V.mean(axis=1, keepdims=True)
    sigma2 = float((centered**2).sum() / M)
    return mu, sigma2, V


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_ensemble(ensemble: ValueEnsemble, path) -> None:
    doc = {
        "schema": ENSEMBLE_SCHEMA,
        "net_spec": {
            "input_dim": ensemble.net_spec.input_dim,
            "hidden_dim": ensemble.net_spec.hidden_dim,
            "activation": ensemble.net_spec.activation,
            "output_dim": ensemble.net_spec.output_dim,
        },
        "norm_mean": ensemble.norm_mean.tolist(),
        "norm_std": ensemble.norm_std.tolist(),
        "contact_mode": ensemble.contact_mode,
        "zeta_spec": ensemble.zeta_spec,
        "rho_max": ensemble.rho_max,
        "members": [
            {
                "W1": m.W1.tolist(),
                "b1": m.b1.tolist(),
                "w2": m.w2.tolist(),
                "b2": m.b2,
            }
            for m in ensemble.members
        ],
        "history": ensemble.history,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_ensemble(path) -> ValueEnsemble:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"unreadable ensemble file {path}: {exc}") from exc
    if doc.get("schema") != ENSEMBLE_SCHEMA:
        raise InputError(f"unsupported ensemble schema {doc.get('schema')!r}")
    spec = NetSpec(**doc["net_spec"])
    members = [
        MLP(np.array(m["W1"]), np.array(m["b1"]), np.array(m["w2"]), m["b2"])
        for m in doc["members"]
    ]
    return ValueEnsemble(
        spec,
        members,
        np.array(doc["norm_mean"]),
        np.array(doc["norm_std"]),
        contact_mode=doc["contact_mode"],
        zeta_spec=doc["zeta_spec"],
        rho_max=doc["rho_max"],
        history=doc.get("history", {}),
    )

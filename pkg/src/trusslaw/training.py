"""Training of the hypernetwork on homogenized stress and energy data.

Each design contributes all of its converged records. The predicted stress
is the symmetrized derivative of the predicted energy with respect to the
strain, so the parameter gradient runs through a second derivative of the
energy network; jax handles the nesting.

Stresses and energies are divided by a data scale before fitting; the scale
is stored with the trained model and undone at prediction time.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._jax import jax, jnp
from .design import encode
from .hypernet import HypernetArch, Hypernetwork, forward, init_params
from .kinematics import from_voigt
from .metrics import COMPONENTS, MetricsReport, stress_report

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda_S: float = 1.0
    lambda_W: float = 0.2
    learning_rate: float = 5e-4
    batch_size: int = 64
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    clip_norm: float = 1e3
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_S < 0 or self.lambda_W < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_S == 0 and self.lambda_W == 0:
            raise ValueError("loss weights cannot both be zero")
        if self.batch_size < 1 or self.epochs < 0 or not self.learning_rate > 0:
            raise ValueError("batch size, epochs and learning rate must be positive")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new params."""
    if state.m.shape != params.shape:
        raise ValueError("moment vectors do not match the parameter vector")
    state.t += 1
    state.m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    state.v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    mhat = state.m / (1 - cfg.beta1**state.t)
    vhat = state.v / (1 - cfg.beta2**state.t)
    return params - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)


def clip_by_norm(grad: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(grad))
    return grad * (limit / n) if n > limit else grad


# --------------------------------------------------------------------------
# data grouped by design


@dataclass
class DesignData:
    """Records grouped per design, padded to a common count with a mask.

    S and W are stored in physical units; ``scale`` is applied in the loss.
    """

    design_ids: np.ndarray
    features: np.ndarray  # (D, 117)
    E: np.ndarray  # (D, R, 3, 3)
    S: np.ndarray  # (D, R, 3, 3)
    W: np.ndarray  # (D, R)
    mask: np.ndarray  # (D, R)
    path_ids: np.ndarray  # (D, R)

    @property
    def n_designs(self) -> int:
        return len(self.design_ids)

    @property
    def n_records(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_rows(cls, rows, graphs: dict, pad_to: int | None = None) -> "DesignData":
        """``rows`` are converged dataset records, ``graphs`` maps design id
        to its OctantGraph."""
        from .dataset import FLAG_CONVERGED

        bad = ((rows["flags"] & FLAG_CONVERGED) == 0) | ~np.isfinite(rows["W"]) | ~np.all(np.isfinite(rows["S"]), axis=1)
        if np.any(bad):
            raise TrainingError(f"{int(bad.sum())} unconverged records passed to the trainer")
        ids = np.unique(rows["design"])
        counts = [int(np.sum(rows["design"] == d)) for d in ids]
        R = max(counts + [pad_to or 1])
        D = len(ids)
        E = np.zeros((D, R, 3, 3))
        S = np.zeros((D, R, 3, 3))
        W = np.zeros((D, R))
        mask = np.zeros((D, R))
        pids = -np.ones((D, R), dtype=int)
        feats = np.zeros((D, 117))
        for k, d in enumerate(ids):
            sel = rows[rows["design"] == d]
            order = np.lexsort((sel["t"], sel["path"]))
            sel = sel[order]
            n = len(sel)
            E[k, :n] = from_voigt(sel["E"])
            S[k, :n] = from_voigt(sel["S"])
            W[k, :n] = sel["W"]
            mask[k, :n] = 1.0
            pids[k, :n] = sel["path"]
            feats[k] = encode(graphs[int(d)])
        return cls(ids.astype(int), feats, E, S, W, mask, pids)

    def subset(self, index) -> "DesignData":
        index = np.asarray(index, dtype=int)
        return DesignData(self.design_ids[index], self.features[index], self.E[index], self.S[index],
                          self.W[index], self.mask[index], self.path_ids[index])

    def data_scale(self) -> float:
        """Root-mean-square Frobenius norm of the stress records."""
        sq = np.sum(self.S**2, axis=(2, 3))
        n = self.mask.sum()
        val = float(np.sqrt(np.sum(sq * self.mask) / n)) if n else 0.0
        return val if val > 0 else 1.0


def _pad_designs(data: DesignData, index, size: int):
    """Arrays for the designs in ``index`` padded to ``size`` with masked rows."""
    index = np.asarray(index, dtype=int)
    pad = size - len(index)

    def take(arr):
        out = arr[index]
        if pad:
            out = np.concatenate([out, np.zeros((pad,) + arr.shape[1:], dtype=arr.dtype)])
        return out

    return take(data.features), take(data.E), take(data.S), take(data.W), take(data.mask)


# --------------------------------------------------------------------------
# jax model pieces


def _softplus(x):
    return jnp.logaddexp(0.0, x)


def icnn_energy_jax(fc, pt, b, y, arch: HypernetArch):
    """Raw network energy for a stack of strain vectors y (R, 9)."""
    h1, h2, h3 = arch.icnn_hidden
    al, be = arch.alpha, arch.beta
    k = 0
    A1 = fc[k : k + h1 * 9].reshape(h1, 9); k += h1 * 9
    Wz2 = fc[k : k + h2 * h1].reshape(h2, h1); k += h2 * h1
    Wz3 = fc[k : k + h3 * h2].reshape(h3, h2); k += h3 * h2
    Wzo = fc[k : k + h3]
    Wy2 = pt[: h2 * 9].reshape(h2, 9)
    Wy3 = pt[h2 * 9 : h2 * 9 + h3 * 9].reshape(h3, 9)
    Wyo = pt[h2 * 9 + h3 * 9 :]
    b1, b2, b3, bo = b[:h1], b[h1 : h1 + h2], b[h1 + h2 : h1 + h2 + h3], b[-1]

    def phi(x):
        return al * _softplus(x) ** 2

    z1 = phi(y @ A1.T + b1)
    z2 = phi(z1 @ (be * _softplus(Wz2)).T + y @ Wy2.T + b2)
    z3 = phi(z2 @ (be * _softplus(Wz3)).T + y @ Wy3.T + b3)
    return z3 @ (be * _softplus(Wzo)) + y @ Wyo + bo


def _design_prediction(fc, pt, b, E, arch):
    """Corrected (S_hat, W_hat) in normalized units for one design."""
    R = E.shape[0]
    y = E.reshape(R, 9)

    def total(yy):
        return jnp.sum(icnn_energy_jax(fc, pt, b, yy, arch))

    e = icnn_energy_jax(fc, pt, b, y, arch)
    G = jax.grad(total)(y).reshape(R, 3, 3)
    zero = jnp.zeros((1, 9))
    e0 = icnn_energy_jax(fc, pt, b, zero, arch)[0]
    G0 = jax.grad(total)(zero).reshape(3, 3)
    H = -0.5 * (G0 + G0.T)
    S_hat = 0.5 * (G + jnp.swapaxes(G, 1, 2)) + H
    W_hat = e + jnp.einsum("rij,ij->r", E, H) - e0
    return S_hat, W_hat


class LossModel:
    """Jitted loss, gradient and prediction functions for one architecture."""

    def __init__(self, arch: HypernetArch):
        self.arch = arch
        self.n_theta = arch.n_params
        self.n_bias = arch.icnn.n_bias

        def components(params, feats, E, S, W, mask):
            theta, b = params[: self.n_theta], params[self.n_theta :]
            fc, pt = forward(theta, feats, arch, xp=jnp)
            S_hat, W_hat = jax.vmap(_design_prediction, in_axes=(0, 0, None, 0, None))(fc, pt, b, E, arch)
            n = jnp.sum(mask)
            loss_S = jnp.sum(mask * jnp.sum((S_hat - S) ** 2, axis=(2, 3))) / n
            loss_W = jnp.sum(mask * (W_hat - W) ** 2) / n
            return loss_S, loss_W

        def loss(params, feats, E, S, W, mask, lam):
            ls, lw = components(params, feats, E, S, W, mask)
            return lam[0] * ls + lam[1] * lw, (ls, lw)

        def predict(params, feats, E):
            theta, b = params[: self.n_theta], params[self.n_theta :]
            fc, pt = forward(theta, feats, arch, xp=jnp)
            return jax.vmap(_design_prediction, in_axes=(0, 0, None, 0, None))(fc, pt, b, E, arch)

        self._loss = jax.jit(loss)
        self._value_and_grad = jax.jit(jax.value_and_grad(loss, has_aux=True))
        self._predict = jax.jit(predict)

    def loss(self, params, batch, lam):
        value, (ls, lw) = self._loss(params, *batch, jnp.asarray(lam, dtype=jnp.float64))
        return float(value), float(ls), float(lw)

    def value_and_grad(self, params, batch, lam):
        (value, (ls, lw)), g = self._value_and_grad(params, *batch, jnp.asarray(lam, dtype=jnp.float64))
        return float(value), float(ls), float(lw), np.asarray(g)

    def predict(self, params, feats, E):
        S, W = self._predict(params, feats, E)
        return np.asarray(S), np.asarray(W)


def normalized_batch(data: DesignData, index, size: int, scale: float):
    f, E, S, W, m = _pad_designs(data, index, size)
    return f, E, S / scale, W / scale, m


def finite_difference_check(model: LossModel, params, batch, lam, n: int, rng: np.random.Generator,
                            rel_step: float = 1e-6):
    """Analytic vs central-difference gradient on ``n`` random entries.

    Returns (indices, analytic, numeric)."""
    _, _, _, g = model.value_and_grad(params, batch, lam)
    idx = rng.choice(len(params), size=n, replace=False)
    num = np.empty(n)
    for k, i in enumerate(idx):
        h = rel_step * max(1.0, abs(params[i]))
        p1, p2 = params.copy(), params.copy()
        p1[i] += h
        p2[i] -= h
        num[k] = (model.loss(p1, batch, lam)[0] - model.loss(p2, batch, lam)[0]) / (2 * h)
    return idx, g[idx], num


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Hypernetwork
    steps: list = field(default_factory=list)  # (step, epoch, loss, loss_S, loss_W, wall_ms)
    epochs: list = field(default_factory=list)  # (epoch, mean loss, train NRMSE)
    initial_loss: float = float("nan")
    adam: AdamState | None = None

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "loss", "loss_S", "loss_W", "wall_ms"])
            for row in self.steps:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4]), f"{row[5]:.1f}"])

    def write_epochs(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_nrmse"])
            for row in self.epochs:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def pooled_stress_nrmse(S_true, S_pred, mask) -> float:
    """RMSE over all six stress components divided by their common range."""
    sel = mask.astype(bool)
    iu = ([0, 1, 2, 1, 0, 0], [0, 1, 2, 2, 2, 1])
    t = S_true[sel][:, iu[0], iu[1]]
    p = S_pred[sel][:, iu[0], iu[1]]
    span = float(t.max() - t.min())
    return float(np.sqrt(np.mean((t - p) ** 2))) / span if span > 0 else float("nan")


def predict_data(model: LossModel, params, data: DesignData, scale: float, chunk: int):
    """Physical-unit predictions (S, W) for every padded record of ``data``."""
    S_out = np.zeros_like(data.S)
    W_out = np.zeros_like(data.W)
    for start in range(0, data.n_designs, chunk):
        idx = np.arange(start, min(start + chunk, data.n_designs))
        f, E, _, _, _ = _pad_designs(data, idx, chunk)
        S, W = model.predict(params, f, E)
        S_out[idx] = S[: len(idx)] * scale
        W_out[idx] = W[: len(idx)] * scale
    return S_out, W_out


def train(data: DesignData, config: TrainConfig, arch: HypernetArch = HypernetArch(),
          hook=None, checkpoint=None, init: Hypernetwork | None = None) -> TrainResult:
    """Adam on (theta_h, shared biases) over shuffled design minibatches.

    ``hook(step, params, batch)`` is called after every update (used for
    gradient spot checks); ``checkpoint(epoch, model)`` at the configured
    cadence and on NaN abort with the last good parameters.
    """
    if data.n_designs == 0 or data.n_records == 0:
        raise TrainingError("training data is empty")
    rng = np.random.default_rng(config.seed)
    scale = data.data_scale() if init is None else init.scale
    if init is None:
        theta = init_params(arch, rng)
        biases = np.zeros(arch.icnn.n_bias)
    else:
        theta, biases = init.theta.copy(), init.biases.copy()
    params = np.concatenate([theta, biases])
    model = LossModel(arch)
    adam = AdamState.zeros(len(params))
    lam = (config.lambda_S, config.lambda_W)
    B = min(config.batch_size, data.n_designs)

    def as_model(p):
        return Hypernetwork(arch, p[: model.n_theta].copy(), p[model.n_theta :].copy(), scale)

    full = normalized_batch(data, np.arange(data.n_designs), data.n_designs, scale)
    result = TrainResult(as_model(params), initial_loss=model.loss(params, full, lam)[0], adam=adam)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(data.n_designs)
        losses = []
        for start in range(0, data.n_designs, B):
            t0 = time.perf_counter()
            batch = normalized_batch(data, order[start : start + B], B, scale)
            value, ls, lw, g = model.value_and_grad(params, batch, lam)
            if not (np.isfinite(value) and np.all(np.isfinite(g))):
                bad = _nonfinite_segments(g, arch)
                if checkpoint is not None:
                    checkpoint(epoch, as_model(params))
                raise TrainingError(f"non-finite loss or gradient at step {step + 1} ({bad})")
            params = adam_step(params, clip_by_norm(g, config.clip_norm), adam, config)
            step += 1
            losses.append(value)
            result.steps.append((step, epoch, value, ls, lw, 1e3 * (time.perf_counter() - t0)))
            if hook is not None:
                hook(step, params, batch)
        S_pred, _ = predict_data(model, params, data, scale, B)
        nr = pooled_stress_nrmse(data.S, S_pred, data.mask)
        result.epochs.append((epoch, float(np.mean(losses)), nr))
        log.info("epoch %d loss %.6e train NRMSE %.4e", epoch, np.mean(losses), nr)
        if checkpoint is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoint(epoch, as_model(params))
    result.model = as_model(params)
    return result


def _nonfinite_segments(g, arch: HypernetArch) -> str:
    names = []
    k = 0
    for block, layers in arch.layer_shapes().items():
        for i, (a, b) in enumerate(layers):
            n = a * b + b
            if not np.all(np.isfinite(g[k : k + n])):
                names.append(f"{block}[{i}]")
            k += n
    if not np.all(np.isfinite(g[k:])):
        names.append("shared biases")
    return ", ".join(names) or "loss only"


# --------------------------------------------------------------------------
# evaluation


def evaluate(split: str, rows, graphs: dict, plan_paths: dict, hn: Hypernetwork,
             report: MetricsReport | None = None) -> MetricsReport:
    """Metrics of the analytic model predictions against dataset records."""
    if len(rows) == 0:
        raise ValueError(f"split {split} is empty")
    S_true = rows["S"]
    W_true = rows["W"]
    S_pred = np.zeros_like(S_true)
    W_pred = np.zeros_like(W_true)
    from .kinematics import to_voigt

    for d in np.unique(rows["design"]):
        sel = rows["design"] == d
        law = hn.predict_model(graphs[int(d)])
        E = from_voigt(rows["E"][sel])
        S_pred[sel] = to_voigt(law.stress(E))
        W_pred[sel] = law.energy_E(E)
    families = np.array([plan_paths[int(p)].kind for p in rows["path"]])
    return stress_report(split, S_true, S_pred, families, report, W_true, W_pred)


def lambda_sweep(data: DesignData, base: TrainConfig, lambdas, eval_sets: dict,
                 arch: HypernetArch = HypernetArch()) -> list:
    """Train one model per energy weight; rows of (lambda_W, {split: NRMSE})."""
    if not lambdas:
        raise ValueError("empty lambda list")
    table = []
    for lw in lambdas:
        cfg = replace(base, lambda_W=float(lw))
        res = train(data, cfg, arch)
        row = {}
        for name, (rows, graphs, paths) in eval_sets.items():
            rep = evaluate(name, rows, graphs, paths, res.model)
            row[name] = pooled_nrmse(rep, name)
        table.append((float(lw), row))
    return table


def pooled_nrmse(report: MetricsReport, split: str) -> float:
    """Mean of the per-component stress NRMSE values that are defined."""
    vals = [report.get(split, c).nrmse for c in COMPONENTS]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def write_sweep(path, table) -> None:
    splits = sorted({k for _, row in table for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_W"] + [f"nrmse_{s}" for s in splits])
        for lw, row in table:
            w.writerow([repr(lw)] + [repr(row.get(s, float("nan"))) for s in splits])

"""Voigt-Reuss constrained neural surrogate for the homogenized stiffness.

The network maps standardized ``chi = (v_f, E_f, E_m)`` to rotation
parameters ``xi_q`` and eigenvalues ``xi_lam`` in (0, 1). With the gap
factorisation ``C_V - C_R = L L^T`` the prediction is

    C_tilde = Q diag(xi_lam) Q^T,   Q = expm(skew(xi_q)),
    C_hat   = C_V - L C_tilde L^T,

which lies between the Reuss and Voigt bounds for every parameter value.
Training compares normalized tensors ``L^+ (C_V - C) L^+T``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import artifacts
from .micromech import PAPER_RANGES, RVEDataset, VoigtBounds, batch_bounds

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


# -- spectral codec ------------------------------------------------------------


def normalize(c_hom, bounds: VoigtBounds) -> np.ndarray:
    """``L^+ (C_V - C) L^+T``; zero at the Voigt bound, identity at the Reuss bound."""
    lp = bounds.L_pinv
    out = lp @ (bounds.C_V - np.asarray(c_hom)) @ lp.T
    return 0.5 * (out + out.T)


def reconstruct_from_normalized(c_tilde, bounds: VoigtBounds) -> np.ndarray:
    out = bounds.C_V - bounds.L @ np.asarray(c_tilde) @ bounds.L.T
    return 0.5 * (out + out.T)


def n_rotation_params(m: int) -> int:
    return m * (m - 1) // 2


def skew(xi_q, m: int) -> np.ndarray:
    """Skew matrix with ``A[j, i] = xi`` and ``A[i, j] = -xi`` for ``i < j``."""
    xi_q = np.asarray(xi_q, dtype=float)
    iu = np.triu_indices(m, 1)
    a = np.zeros(xi_q.shape[:-1] + (m, m))
    a[..., iu[1], iu[0]] = xi_q
    a[..., iu[0], iu[1]] = -xi_q
    return a


def expm(a) -> np.ndarray:
    """Matrix exponential of a stack of square matrices (Taylor with scaling and squaring)."""
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    norm = np.max(np.abs(a).sum(axis=-2), initial=0.0)
    s = max(0, int(math.ceil(math.log2(norm / 0.25)))) if norm > 0 else 0
    x = a / 2.0**s
    eye = np.broadcast_to(np.eye(n), a.shape)
    e = eye.copy()
    for k in range(14, 0, -1):
        e = eye + (x @ e) / k
    for _ in range(s):
        e = e @ e
    return e


def expm_adjoint(a, g) -> np.ndarray:
    """Gradient of ``<G, expm(A)>`` with respect to ``A``.

    This is the Frechet derivative of the exponential at ``A^T`` in
    direction ``G``, read off the upper-right block of
    ``expm([[A^T, G], [0, A^T]])``.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    at = np.swapaxes(a, -1, -2)
    big = np.zeros(a.shape[:-2] + (2 * n, 2 * n))
    big[..., :n, :n] = at
    big[..., n:, n:] = at
    big[..., :n, n:] = g
    return expm(big)[..., :n, n:]


def orthogonal_from_params(xi_q, m: int) -> np.ndarray:
    return expm(skew(xi_q, m))


def normalized_from_params(xi_q, xi_lam, m: int) -> np.ndarray:
    q = orthogonal_from_params(xi_q, m)
    lam = np.asarray(xi_lam, dtype=float)
    return (q * lam[..., None, :]) @ np.swapaxes(q, -1, -2)


def reconstruct(xi_q, xi_lam, bounds: VoigtBounds) -> np.ndarray:
    """Stiffness from rotation and eigenvalue parameters; always within the bounds."""
    return reconstruct_from_normalized(normalized_from_params(xi_q, xi_lam, bounds.m), bounds)


def loss(pred, true) -> float:
    """``(1/sqrt(m)) * mean_b ||pred_b - true_b||_F``."""
    pred, true = np.asarray(pred, dtype=float), np.asarray(true, dtype=float)
    if pred.shape != true.shape:
        raise ValueError("prediction and target shapes differ")
    m = pred.shape[-1]
    return float(np.mean(np.linalg.norm(pred - true, axis=(-2, -1))) / math.sqrt(m))


def loss_grad(pred, true) -> tuple[float, np.ndarray]:
    d = np.asarray(pred, dtype=float) - np.asarray(true, dtype=float)
    m = d.shape[-1]
    nrm = np.linalg.norm(d, axis=(-2, -1))
    val = float(nrm.mean() / math.sqrt(m))
    safe = np.where(nrm > 0, nrm, 1.0)
    g = np.where(nrm[:, None, None] > 0, d / safe[:, None, None], 0.0) / (d.shape[0] * math.sqrt(m))
    return val, g


# -- network -------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 50_000
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    final_lr_ratio: float = 1.0
    log_every: int = 0

    def __post_init__(self):
        if not 0 < self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must lie in (0, 1]")
        if not self.learning_rate > 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("learning rate must be positive; weight decay and epochs nonnegative")


@dataclass(eq=False)
class VRNN:
    """Network weights plus the data needed to turn its outputs into stiffnesses.

    Parameters
    ----------
    weights, biases : list of ndarray
        Dense layers; hidden layers use ``tanh``.
    m : int
        Voigt size of the predicted stiffness.
    lo, hi : ndarray
        Input ranges mapped affinely to [-1, 1].
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    m: int
    lo: np.ndarray = field(default_factory=lambda: np.array([r[0] for r in PAPER_RANGES]))
    hi: np.ndarray = field(default_factory=lambda: np.array([r[1] for r in PAPER_RANGES]))
    nu_f: float = 0.22
    nu_m: float = 0.35
    activation: str = "tanh"

    @classmethod
    def initialise(cls, m: int, hidden=(64, 64, 64), seed: int = 0, **kwargs) -> "VRNN":
        rng = np.random.default_rng(seed)
        sizes = [3, *hidden, n_rotation_params(m) + m]
        ws, bs = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (a + b))
            ws.append(rng.uniform(-lim, lim, (a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs, m, **kwargs)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "VRNN":
        return VRNN([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.m,
                    self.lo.copy(), self.hi.copy(), self.nu_f, self.nu_m, self.activation)

    def standardize(self, chi) -> np.ndarray:
        chi = np.atleast_2d(np.asarray(chi, dtype=float))
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return 2.0 * (chi - self.lo) / span - 1.0

    def _forward(self, x):
        acts = [x]
        h = x
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = np.tanh(z) if k < len(self.weights) - 1 else z
            acts.append(h)
        nq = n_rotation_params(self.m)
        out = acts[-1]
        xi_q, xi_lam = out[:, :nq], _sigmoid(out[:, nq:])
        a = skew(xi_q, self.m)
        q = expm(a)
        ct = (q * xi_lam[:, None, :]) @ np.swapaxes(q, 1, 2)
        return ct, (acts, a, q, xi_lam)

    def predict_normalized(self, chi) -> np.ndarray:
        return self._forward(self.standardize(chi))[0]

    def bounds(self, chi):
        return batch_bounds(chi, self.m, self.nu_f, self.nu_m)

    def predict(self, chi) -> np.ndarray:
        """Homogenized stiffness ``(N, m, m)`` for rows of ``chi``."""
        chi = np.atleast_2d(np.asarray(chi, dtype=float))
        c_v, _, L, _ = self.bounds(chi)
        ct = self.predict_normalized(chi)
        out = c_v - L @ ct @ np.swapaxes(L, 1, 2)
        return 0.5 * (out + np.swapaxes(out, 1, 2))

    def loss_and_grad(self, x, target) -> tuple[float, list[np.ndarray]]:
        """Loss on standardized inputs and its gradient, ordered like :meth:`params`."""
        ct, (acts, a, q, lam) = self._forward(x)
        val, g = loss_grad(ct, target)
        g = 0.5 * (g + np.swapaxes(g, 1, 2))
        # C = Q diag(lam) Q^T
        g_lam = np.einsum("bij,bik,bjk->bk", g, q, q)
        g_q = 2.0 * (g @ q) * lam[:, None, :]
        g_a = expm_adjoint(a, g_q)
        iu = np.triu_indices(self.m, 1)
        g_xiq = g_a[:, iu[1], iu[0]] - g_a[:, iu[0], iu[1]]
        g_out = np.concatenate([g_xiq, g_lam * lam * (1.0 - lam)], axis=1)
        grads = []
        delta = g_out
        for k in range(len(self.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(acts[k].T @ delta)
            if k:
                delta = (delta @ self.weights[k].T) * (1.0 - acts[k] ** 2)
        grads.reverse()
        # reversed list is [dW0, db0, dW1, db1, ...]
        return val, grads

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        arrays = {"lo": self.lo, "hi": self.hi}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"W{k}"] = w
            arrays[f"b{k}"] = b
        meta = {"m": self.m, "layer_sizes": self.layer_sizes, "activation": self.activation,
                "nu_f": self.nu_f, "nu_m": self.nu_m}
        artifacts.save(path, "vrnn", arrays, meta)

    @classmethod
    def load(cls, path) -> "VRNN":
        arrays, meta = artifacts.load(path, "vrnn")
        n = len(meta["layer_sizes"]) - 1
        return cls([arrays[f"W{k}"] for k in range(n)], [arrays[f"b{k}"] for k in range(n)],
                   int(meta["m"]), arrays["lo"], arrays["hi"], float(meta["nu_f"]),
                   float(meta["nu_m"]), meta["activation"])


@dataclass
class TrainingHistory:
    train: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)
    best_epoch: int = 0


def normalized_targets(ds: RVEDataset) -> np.ndarray:
    _, _, _, lp = batch_bounds(ds.chi, ds.m, ds.nu_f, ds.nu_m)
    gap = ds.C_V - ds.C_hom
    out = lp @ gap @ np.swapaxes(lp, 1, 2)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def train(ds: RVEDataset, config: TrainingConfig = TrainingConfig(),
          ranges=None) -> tuple[VRNN, TrainingHistory]:
    """Full-batch AdamW training; returns the best-validation network.

    The learning rate starts at ``config.learning_rate`` and decays
    exponentially to ``final_lr_ratio`` times that value over the run.
    """
    ranges = PAPER_RANGES if ranges is None else ranges
    net = VRNN.initialise(ds.m, config.hidden, config.seed,
                          lo=np.array([r[0] for r in ranges], dtype=float),
                          hi=np.array([r[1] for r in ranges], dtype=float),
                          nu_f=ds.nu_f, nu_m=ds.nu_m)
    target = normalized_targets(ds)
    x_all = net.standardize(ds.chi)
    xt, yt = x_all[ds.train_idx], target[ds.train_idx]
    has_val = len(ds.val_idx) > 0
    xv, yv = x_all[ds.val_idx], target[ds.val_idx]
    hist = TrainingHistory()
    best = net.copy()
    best_val = math.inf
    params = net.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2 = config.beta1, config.beta2
    decay = config.final_lr_ratio ** (1.0 / max(config.epochs, 1))
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate * decay ** (epoch - 1)
        val, grads = net.loss_and_grad(xt, yt)
        if not math.isfinite(val):
            raise TrainingDivergedError(epoch)
        for p, g, a, v in zip(params, grads, m1, m2):
            a *= b1
            a += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p *= 1.0 - lr * config.weight_decay
            p -= lr * (a / (1 - b1**epoch)) / (
                np.sqrt(v / (1 - b2**epoch)) + config.adam_eps)
        hist.train.append(val)
        vl = loss(net._forward(xv)[0], yv) if has_val else val
        hist.validation.append(vl)
        if vl < best_val:
            best_val = vl
            best = net.copy()
            hist.best_epoch = epoch
        if config.log_every and epoch % config.log_every == 0:
            logger.info("epoch %d train %.4e validation %.4e", epoch, val, vl)
    if config.epochs == 0:
        best = net
    return best, hist


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size < window:
        return np.zeros(0)
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def trend_excess(history, start: int = 1000, window: int = 100) -> float:
    """Largest relative rise of the moving-average loss above its running minimum after ``start``.

    Zero means the moving average never increases; small positive values
    are optimizer jitter around a plateau.
    """
    ma = moving_average(history, window)[start:]
    if ma.size == 0:
        return 0.0
    return float(np.max(ma / np.minimum.accumulate(ma) - 1.0))


def moving_average_rises(history, start: int = 1000, window: int = 100, stride: int = 100) -> int:
    """Number of increases of the ``window``-epoch moving average sampled every ``stride`` epochs.

    Windows are ``[start + k * stride, start + k * stride + window)``; with
    ``stride == window`` these are consecutive non-overlapping blocks.
    """
    ma = moving_average(history, window)[start::stride]
    return int(np.sum(np.diff(ma) > 0))


def r2_per_component(pred, true) -> np.ndarray:
    """Coefficient of determination of each upper-triangle entry; ``nan`` where the target is constant."""
    m = true.shape[-1]
    iu = np.triu_indices(m)
    p, t = pred[:, iu[0], iu[1]], true[:, iu[0], iu[1]]
    ss_res = np.sum((p - t) ** 2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    scale = np.max(np.abs(true), axis=(0, 1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    return np.where(ss_tot > (1e-12 * scale) ** 2 * len(t), r2, np.nan)


class VRNNRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper: ``X`` rows are ``(v_f, E_f, E_m)``, ``y`` rows are
    the upper-triangle entries of ``C_hom``."""

    def __init__(self, m: int = 4, hidden=(64, 64, 64), learning_rate: float = 1e-4,
                 weight_decay: float = 1e-4, epochs: int = 50_000, seed: int = 0,
                 nu_f: float = 0.22, nu_m: float = 0.35, validation_fraction: float = 0.2):
        self.m = m
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed
        self.nu_f = nu_f
        self.nu_m = nu_m
        self.validation_fraction = validation_fraction

    def _to_matrix(self, y):
        y = np.asarray(y, dtype=float)
        iu = np.triu_indices(self.m)
        if y.ndim != 2 or y.shape[1] != len(iu[0]):
            raise ValueError(f"y must have {len(iu[0])} columns")
        out = np.zeros((y.shape[0], self.m, self.m))
        out[:, iu[0], iu[1]] = y
        out[:, iu[1], iu[0]] = y
        return out

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 3:
            raise ValueError("X must have three columns (v_f, E_f, E_m)")
        c = self._to_matrix(y)
        if len(c) != len(X):
            raise ValueError("X and y lengths differ")
        c_v, c_r, _, _ = batch_bounds(X, self.m, self.nu_f, self.nu_m)
        perm = np.random.default_rng(self.seed).permutation(len(X))
        n_val = int(round(self.validation_fraction * len(X)))
        ds = RVEDataset(X, c, c_v, c_r, np.sort(perm[n_val:]), np.sort(perm[:n_val]), self.m, 0,
                        self.seed, self.nu_f, self.nu_m)
        ranges = tuple(zip(X.min(axis=0), X.max(axis=0)))
        cfg = TrainingConfig(self.learning_rate, self.weight_decay, self.epochs, self.seed,
                             tuple(self.hidden))
        self.model_, self.history_ = train(ds, cfg, ranges)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise RuntimeError("VRNNRegressor is not fitted")
        c = self.model_.predict(X)
        iu = np.triu_indices(self.m)
        return c[:, iu[0], iu[1]]

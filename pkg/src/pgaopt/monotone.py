"""Sign-constrained ReLU networks and the unrolled surrogate built from them.

Two networks approximate the pipe: ``g`` maps the previous state and a
window of (heat, power) decisions to the next state, ``f`` maps the state and
the same window to delivered heat. With non-negative weights and ReLU
activations both are non-decreasing in every constrained input, and so is
their composition over the horizon.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dhs.physics import (
    DhsParams,
    Dataset,
    STATE_NAMES,
    node_method,
    warmup_history,
)
from .dhs.simplified import chp_cost, chp_cost_grad
from .errors import ContractViolation, DataFormatError
from .opt_core import AdamState, PolygonSet, adam_step
from .problem import PenaltyProblem

log = logging.getLogger(__name__)

FORMAT_NAME = "pgaopt-monotone-net"
FORMAT_VERSION = 1

# physical ranges used to scale features to [0, 1]
STATE_RANGES = {"tin": (70.0, 120.0), "tout": (70.0, 115.0), "mdot": (5.0, 810.0)}
HEAT_RANGE = (0.0, 70.0)
POWER_RANGE = (0.0, 50.0)
DELIVERED_RANGE = (5.0, 65.0)


@dataclass
class Normalizer:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ContractViolation("normalizer needs hi > lo per feature")

    @property
    def span(self):
        return self.hi - self.lo

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.span

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.span + self.lo

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


@lru_cache(maxsize=None)
def state_normalizer() -> Normalizer:
    r = [STATE_RANGES[s] for s in STATE_NAMES]
    return Normalizer([a for a, _ in r], [b for _, b in r])


@lru_cache(maxsize=None)
def window_normalizer(n_w: int) -> Normalizer:
    lo = np.tile([HEAT_RANGE[0], POWER_RANGE[0]], n_w + 1)
    hi = np.tile([HEAT_RANGE[1], POWER_RANGE[1]], n_w + 1)
    return Normalizer(lo, hi)


# --------------------------------------------------------------------------

@dataclass
class MonotoneNet:
    """Dense ReLU network; ``masks[l][j, i]`` marks weight ``W[l][j, i]`` as kept >= 0."""

    weights: list
    biases: list
    masks: list
    in_norm: Normalizer
    out_norm: Normalizer
    meta: dict = field(default_factory=dict)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, layer_sizes: Sequence[int], in_norm: Normalizer, out_norm: Normalizer,
             rng: np.random.Generator, free_inputs: Sequence[int] = ()) -> "MonotoneNet":
        """Random non-negative initialisation. ``free_inputs`` are input columns left unconstrained."""
        weights, biases, masks = [], [], []
        for l, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            w = np.abs(rng.standard_normal((n_out, n_in))) / n_in
            mask = np.ones((n_out, n_in), dtype=bool)
            if l == 0 and len(free_inputs):
                mask[:, list(free_inputs)] = False
                w[:, list(free_inputs)] = rng.standard_normal((n_out, len(free_inputs))) / n_in
            weights.append(w)
            biases.append(np.zeros(n_out) if l == len(layer_sizes) - 2 else -0.1 * rng.random(n_out))
            masks.append(mask)
        return cls(weights, biases, masks, in_norm, out_norm)

    # -- inference -------------------------------------------------------
    def forward(self, x):
        """Output for normalized input ``x`` (shape (n_in,) or (batch, n_in)); output normalized."""
        a = np.asarray(x, dtype=float)
        if a.shape[-1] != self.weights[0].shape[1]:
            raise ContractViolation(f"input width {a.shape[-1]} != {self.weights[0].shape[1]}")
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if l < last:
                a = np.maximum(a, 0.0)
        return a

    def _activations(self, x):
        acts = [np.asarray(x, dtype=float)]
        pre = []
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if l < last else z)
        return acts, pre

    def input_gradient(self, x, seed=None):
        """Reverse pass: ``seed^T d out / d x`` for a single input (seed defaults to ones)."""
        acts, pre = self._activations(x)
        grad = np.ones(self.weights[-1].shape[0]) if seed is None else np.asarray(seed, dtype=float)
        for l in range(len(self.weights) - 1, -1, -1):
            if l < len(self.weights) - 1:
                grad = grad * (pre[l] > 0)
            grad = grad @ self.weights[l]
        return grad

    def jacobian(self, x):
        """Full (n_out, n_in) Jacobian at a single normalized input."""
        acts, pre = self._activations(x)
        J = self.weights[0]
        for l in range(1, len(self.weights)):
            J = self.weights[l] @ ((pre[l - 1] > 0)[:, None] * J)
        return J

    def batch_jacobian(self, X):
        """Jacobians at each row of ``X``: shape (batch, n_out, n_in).

        Chained from the output side, which is the cheap direction when the
        output is narrow.
        """
        _, pre = self._activations(X)
        last = len(self.weights) - 1
        J = self.weights[last][None, :, :] * (pre[last - 1] > 0)[:, None, :]
        for l in range(last - 1, 0, -1):
            J = (J @ self.weights[l]) * (pre[l - 1] > 0)[:, None, :]
        return J @ self.weights[0]

    def predict(self, x_raw):
        """Physical-unit convenience wrapper."""
        return self.out_norm.denormalize(self.forward(self.in_norm.normalize(x_raw)))

    # -- persistence -----------------------------------------------------
    def to_dict(self):
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "layer_sizes": self.layer_sizes,
            "weights": [w.ravel().tolist() for w in self.weights],
            "masks": [m.ravel().astype(int).tolist() for m in self.masks],
            "biases": [b.tolist() for b in self.biases],
            "in_norm": self.in_norm.to_dict(),
            "out_norm": self.out_norm.to_dict(),
            "meta": self.meta,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_dict(cls, d) -> "MonotoneNet":
        if d.get("format") != FORMAT_NAME or d.get("version") != FORMAT_VERSION:
            raise DataFormatError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} model")
        sizes = d["layer_sizes"]
        shapes = list(zip(sizes[1:], sizes[:-1]))
        weights = [np.array(w, dtype=float).reshape(s) for w, s in zip(d["weights"], shapes)]
        masks = [np.array(m, dtype=bool).reshape(s) for m, s in zip(d["masks"], shapes)]
        biases = [np.array(b, dtype=float) for b in d["biases"]]
        net = cls(weights, biases, masks, Normalizer(**d["in_norm"]), Normalizer(**d["out_norm"]), d.get("meta", {}))
        if not weights_respect_masks(net):
            raise DataFormatError("model file has negative sign-constrained weights")
        return net

    @classmethod
    def load(cls, path) -> "MonotoneNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def project_weights(net: MonotoneNet) -> MonotoneNet:
    """Clamp every sign-constrained weight at zero (in place; returns ``net``)."""
    for w, m in zip(net.weights, net.masks):
        np.maximum(w, 0.0, out=w, where=m)
    return net


def weights_respect_masks(net: MonotoneNet) -> bool:
    return all(np.all(w[m] >= 0.0) for w, m in zip(net.weights, net.masks))


# --------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 3000
    min_delta: float = 1e-6
    patience: int = 200
    batch_size: int = 128
    seed: int = 0
    hidden: tuple = (50, 50)
    restore_best: bool = True

    def __post_init__(self):
        if min(self.learning_rate, self.max_epochs, self.min_delta, self.patience, self.batch_size) <= 0:
            raise ContractViolation("training hyperparameters must be positive")


G_CONFIG = TrainConfig(max_epochs=3000, min_delta=1e-6, patience=200)
F_CONFIG = TrainConfig(max_epochs=1000, min_delta=5e-6, patience=35)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def _flatten(net):
    return np.concatenate([w.ravel() for w in net.weights] + [b.ravel() for b in net.biases])


def _unflatten(net, theta):
    i = 0
    for w in net.weights:
        w[...] = theta[i: i + w.size].reshape(w.shape)
        i += w.size
    for b in net.biases:
        b[...] = theta[i: i + b.size]
        i += b.size


def _mse_grad(net, X, Y):
    """Mean squared error over all outputs and its parameter gradient (flat)."""
    acts, pre = net._activations(X)
    err = acts[-1] - Y
    n = err.size
    loss = float(np.sum(err * err) / n)
    delta = 2.0 * err / n
    gw, gb = [None] * len(net.weights), [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        if l < len(net.weights) - 1:
            delta = delta * (pre[l] > 0)
        gw[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
    return loss, np.concatenate([g.ravel() for g in gw] + [g.ravel() for g in gb])


def mse(net, X, Y) -> float:
    err = net.forward(X) - Y
    return float(np.mean(err * err))


def fit(net: MonotoneNet, X_train, Y_train, X_test, Y_test, config: TrainConfig) -> TrainHistory:
    """Mini-batch Adam on normalized MSE, clamping constrained weights after each step.

    Stops when the test loss has not improved on its best by more than
    ``min_delta`` for ``patience`` epochs.
    """
    if len(X_train) == 0 or len(X_test) == 0:
        raise ContractViolation("empty training or test set")
    rng = np.random.default_rng(config.seed)
    theta = _flatten(net)
    adam = AdamState.fresh(theta.size, config.learning_rate)
    hist = TrainHistory()
    best, best_theta, waited = np.inf, theta.copy(), 0
    n = len(X_train)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            _, g = _mse_grad(net, X_train[idx], Y_train[idx])
            adam, theta = adam_step(adam, theta, g)
            _unflatten(net, theta)
            project_weights(net)
            theta = _flatten(net)
        hist.train_loss.append(mse(net, X_train, Y_train))
        test = mse(net, X_test, Y_test)
        hist.test_loss.append(test)
        if test < best - config.min_delta:
            best, best_theta, waited = test, theta.copy(), 0
            hist.best_epoch = epoch
        else:
            waited += 1
            if waited >= config.patience:
                hist.stopped_early = True
                break
    if config.restore_best:
        _unflatten(net, best_theta)
    return hist


def g_features(ds: Dataset):
    sn, wn = state_normalizer(), window_normalizer(ds.n_w)
    from .dhs.physics import window_columns
    X = np.hstack((sn.normalize(ds.col(*[f"s_prev_{s}" for s in STATE_NAMES])),
                   wn.normalize(ds.col(*window_columns(ds.n_w)))))
    Y = sn.normalize(ds.col(*[f"s_{s}" for s in STATE_NAMES]))
    return X, Y


def f_features(ds: Dataset):
    sn, wn = state_normalizer(), window_normalizer(ds.n_w)
    from .dhs.physics import window_columns
    X = np.hstack((sn.normalize(ds.col(*[f"s_{s}" for s in STATE_NAMES])),
                   wn.normalize(ds.col(*window_columns(ds.n_w)))))
    Y = Normalizer([DELIVERED_RANGE[0]], [DELIVERED_RANGE[1]]).normalize(ds.col("y"))
    return X, Y


def train(dataset: Dataset, config: Optional[TrainConfig] = None, target: str = "g",
          paper_strict_masks: bool = False):
    """Train the state-transition (``"g"``) or output (``"f"``) network. Returns ``(net, history)``."""
    if target not in ("g", "f"):
        raise ContractViolation("target must be 'g' or 'f'")
    config = config or (G_CONFIG if target == "g" else F_CONFIG)
    X, Y = (g_features if target == "g" else f_features)(dataset)
    if len(X) == 0:
        raise ContractViolation("empty dataset")
    ep = dataset.data[:, 0].astype(int)
    tr = np.isin(ep, dataset.train_episodes)
    if not tr.any() or tr.all():
        raise ContractViolation("dataset needs both train and test episodes")
    n_state = len(STATE_NAMES)
    sizes = [X.shape[1], *config.hidden, Y.shape[1]]
    in_norm = Normalizer(np.concatenate((state_normalizer().lo, window_normalizer(dataset.n_w).lo)),
                         np.concatenate((state_normalizer().hi, window_normalizer(dataset.n_w).hi)))
    out_norm = state_normalizer() if target == "g" else Normalizer([DELIVERED_RANGE[0]], [DELIVERED_RANGE[1]])
    net = MonotoneNet.init(sizes, in_norm, out_norm, np.random.default_rng(config.seed),
                           free_inputs=range(n_state) if paper_strict_masks else ())
    net.meta = {"target": target, "n_w": dataset.n_w, "paper_strict_masks": paper_strict_masks}
    hist = fit(net, X[tr], Y[tr], X[~tr], Y[~tr], config)
    log.info("trained %s-net: %d epochs, best test mse %.3g", target, len(hist.test_loss), min(hist.test_loss))
    return net, hist


def one_step_rmse(net: MonotoneNet, dataset: Dataset, target: str, test_only: bool = True) -> np.ndarray:
    """Per-output RMSE in physical units."""
    X, Y = (g_features if target == "g" else f_features)(dataset)
    if test_only:
        keep = np.isin(dataset.data[:, 0].astype(int), dataset.test_episodes)
        X, Y = X[keep], Y[keep]
    pred = net.out_norm.denormalize(net.forward(X))
    true = net.out_norm.denormalize(Y)
    return np.sqrt(np.mean((pred - true) ** 2, axis=0))


# --------------------------------------------------------------------------
# Unrolled surrogate

@dataclass
class Surrogate:
    g_net: MonotoneNet
    f_net: MonotoneNet
    n_w: int

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.g_net.save(out / "g_net.json")
        self.f_net.save(out / "f_net.json")

    @classmethod
    def load(cls, out_dir) -> "Surrogate":
        out = Path(out_dir)
        g = MonotoneNet.load(out / "g_net.json")
        f = MonotoneNet.load(out / "f_net.json")
        n_w = int(g.meta.get("n_w", 11))
        if int(f.meta.get("n_w", n_w)) != n_w:
            raise DataFormatError("g and f networks disagree on the window length")
        return cls(g, f, n_w)


@lru_cache(maxsize=32)
def _window_selector(T: int, n_w: int) -> np.ndarray:
    """``E[i, p, c]`` = d(normalized window entry p at step i) / d u_c."""
    wn = window_normalizer(n_w)
    width = 2 * (n_w + 1)
    E = np.zeros((T, width, 2 * T))
    for i in range(T):
        for pos in range(width):
            c = 2 * (i - n_w) + pos
            if c >= 0:
                E[i, pos, c] = 1.0 / wn.span[pos]
    E.setflags(write=False)
    return E


def unroll(g_net: MonotoneNet, f_net: MonotoneNet, u, s0, T: int, history_window, n_w: int = 11):
    """Delivered heat over the horizon and its Jacobian w.r.t. ``u``.

    ``u`` is the flat (h1, p1, ..., hT, pT) schedule, ``s0`` the physical
    state before step 1, ``history_window`` the ``n_w`` (heat, power) rows
    preceding step 1. Returns ``(y [MW], dy/du (T, 2T))``.

    The state chain runs forward step by step; the per-step network
    Jacobians are then evaluated in one batch and chained forward in ``u``.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (2 * T,):
        raise ContractViolation(f"schedule must have length {2 * T}")
    hist = np.asarray(history_window, dtype=float).reshape(-1, 2)
    if len(hist) != n_w:
        raise ContractViolation(f"history window must hold {n_w} steps")
    n_state = len(STATE_NAMES)
    width = 2 * (n_w + 1)
    if g_net.weights[0].shape[1] != n_state + width or f_net.weights[0].shape[1] != n_state + width:
        raise ContractViolation("network input width does not match n_w")
    wn = window_normalizer(n_w)
    full = np.concatenate((hist.ravel(), u))
    windows = wn.normalize(full[2 * np.arange(T)[:, None] + np.arange(width)])
    Xg = np.empty((T, n_state + width))
    S = np.empty((T, n_state))
    s = state_normalizer().normalize(s0)
    for i in range(T):
        Xg[i, :n_state] = s
        Xg[i, n_state:] = windows[i]
        s = g_net.forward(Xg[i])
        S[i] = s
    Jg = g_net.batch_jacobian(Xg)
    yf, Jf = f_net.forward(np.hstack((S, windows))), f_net.batch_jacobian(np.hstack((S, windows)))
    E = _window_selector(T, n_w)
    Bg = Jg[:, :, n_state:] @ E
    Bf = Jf[:, 0, None, n_state:] @ E
    y_span = f_net.out_norm.span[0]
    jac = np.empty((T, 2 * T))
    ds = np.zeros((n_state, 2 * T))
    for i in range(T):
        ds = Jg[i, :, :n_state] @ ds + Bg[i]
        jac[i] = Jf[i, 0, :n_state] @ ds + Bf[i, 0]
    return f_net.out_norm.denormalize(yf)[:, 0], y_span * jac


class SurrogateProblem(PenaltyProblem):
    name = "dhs_surrogate"

    def __init__(self, surrogate: Surrogate, demand, params: DhsParams = DhsParams(),
                 warmup_heat: Optional[float] = None):
        self.surrogate = surrogate
        self.params = params
        self.rhs = np.asarray(demand, dtype=float).copy()
        self.horizon = len(self.rhs)
        self.n_window = surrogate.n_w
        self.feasible_set = PolygonSet(params.chp_vertices, self.horizon)
        self.polygon = self.feasible_set.polygon
        h0 = float(self.rhs[0]) if warmup_heat is None else float(warmup_heat)
        self.warmup_heat = h0
        hist = warmup_history(params, h0, max(params.history_length, surrogate.n_w + 1))
        out = node_method(hist.mass_flows, hist.inlet_temps, params).outlet[0]
        self.s0 = np.array([hist.inlet_temps[-1], out, hist.mass_flows[-1]])
        p0 = float(self.polygon.lower_edge(h0)[0])
        self.history_window = np.tile([h0, p0], (surrogate.n_w, 1))

    def objective(self, u):
        return chp_cost(u, self.params)

    def objective_grad(self, u):
        return chp_cost_grad(self.horizon, self.params)

    def constraints_and_jac(self, u):
        s = self.surrogate
        return unroll(s.g_net, s.f_net, u, self.s0, self.horizon, self.history_window, s.n_w)

    def sample_feasible(self, rng, lo=30.0, hi=70.0, max_tries=20_000):
        from .dhs.simplified import sample_feasible_init
        return sample_feasible_init(self, rng, (lo, hi), max_tries=max_tries)


def make_surrogate_problem(g_net: MonotoneNet, f_net: MonotoneNet, demand, params: DhsParams = DhsParams(),
                           **kw) -> SurrogateProblem:
    n_w = int(g_net.meta.get("n_w", 11))
    return SurrogateProblem(Surrogate(g_net, f_net, n_w), demand, params, **kw)

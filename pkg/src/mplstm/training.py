"""RMSprop training loop, evaluation and finite-difference gradient checking."""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, split_batches
from .mathcore import Rng
from .network import Network, NetworkConfig, ScoreFusion, mean_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    num_epochs: int = 50
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    dropout_rate: float = 0.1
    seed: int = 0
    log_every: int = 1  # epochs between progress log lines

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.num_epochs < 0:
            raise ValueError("num_epochs must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class OptimizerState:
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8
    v: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg):
        return cls(lr=cfg.lr, rho=cfg.rho, eps=cfg.eps)


def rmsprop_step(state, params, grads):
    """In-place RMSprop update of every array in ``params``."""
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(theta)
        v *= state.rho
        v += (1.0 - state.rho) * g * g
        theta -= state.lr * g / (np.sqrt(v) + state.eps)
    return params, state


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray  # [true, predicted] counts


def _require_data(data):
    if len(data) == 0:
        raise ValueError("empty dataset")


def train_epoch(model, data, cfg, rng, optimizer=None):
    """One pass over ``data``: shuffled mini-batches, one RMSprop step each.

    Gradients are batch means. Returns the loss and accuracy of the training
    forward passes (dropout active).
    """
    _require_data(data)
    if optimizer is None:
        optimizer = OptimizerState.for_config(cfg)
    params = model.parameters()
    total_loss = 0.0
    correct = 0
    for idx in split_batches(data, cfg.batch_size, rng):
        X, y = data.features[idx], data.labels[idx]
        trace = model.forward(X, rng, dropout_rate=cfg.dropout_rate)
        total_loss += mean_cross_entropy(trace.probs, y) * len(idx)
        correct += int(np.sum(np.argmax(trace.probs, axis=1) == y))
        rmsprop_step(optimizer, params, model.backward(trace, y))
    return EpochMetrics(total_loss / len(data), correct / len(data))


def evaluate(model, data, chunk=500):
    """Dropout-free loss, accuracy and confusion counts."""
    _require_data(data)
    K = data.num_classes
    losses = []
    preds = []
    for start in range(0, len(data), chunk):
        probs = model.predict_proba(data.features[start:start + chunk])
        y = data.labels[start:start + chunk]
        losses.append(mean_cross_entropy(probs, y) * len(y))
        preds.append(np.argmax(probs, axis=1))
    preds = np.concatenate(preds)
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (data.labels, preds), 1)
    return EvalResult(sum(losses) / len(data), float(np.mean(preds == data.labels)), confusion)


def build_model(net_cfg, seed):
    """Fresh model for ``net_cfg``; score fusion members use seeds ``seed + p``."""
    rng = Rng(seed)
    if net_cfg.fusion_mode == "score":
        return ScoreFusion.init(net_cfg, rng)
    return Network.init(net_cfg, rng)


def fit(model, train, val, cfg, callback=None):
    """Train for ``cfg.num_epochs`` epochs; returns one metrics row per epoch.

    Rows are ``(epoch, train_loss, train_acc, val_loss, val_acc)``. For score
    fusion every member trains on its own view with its own stream
    (``seed + p``), and the train columns are the fused ensemble evaluated on
    the training set after the epoch.
    """
    _require_data(train)
    rows = []
    if isinstance(model, ScoreFusion):
        members = [(m, train.view(p), Rng(cfg.seed + p), OptimizerState.for_config(cfg))
                   for p, m in enumerate(model.models)]
    else:
        members = [(model, train, Rng(cfg.seed), OptimizerState.for_config(cfg))]
    for epoch in range(1, cfg.num_epochs + 1):
        results = [train_epoch(m, data, cfg, rng, opt) for m, data, rng, opt in members]
        if isinstance(model, ScoreFusion):
            fused = evaluate(model, train)
            tr_loss, tr_acc = fused.loss, fused.accuracy
        else:
            tr_loss, tr_acc = results[0].loss, results[0].accuracy
        ev = evaluate(model, val)
        rows.append((epoch, tr_loss, tr_acc, ev.loss, ev.accuracy))
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f", *rows[-1])
        if callback is not None:
            callback(rows[-1])
    return rows


# --- gradient checking -------------------------------------------------------

GRID = {
    "m": (1, 2, 3),
    "hidden": (1, 4),
    "n": (1, 5),
    "d": (2,),
    "k": (3,),
    "bidirectional": (False, True),
    "cell": ("mp", "ablation_a", "ablation_b", "ablation_c"),
}
FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradcheckRow:
    label: str
    errors: dict  # tensor name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def relative_error(a, f):
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def check_network(net, X, y, h=FD_STEP):
    """Max relative error between analytic and central-difference gradients per tensor."""
    analytic = net.backward(net.forward(X), y)
    errors = {}
    for name, theta in net.parameters().items():
        numeric = np.empty_like(theta)
        flat = theta.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = net.loss(X, y)
            flat[j] = old - h
            down = net.loss(X, y)
            flat[j] = old
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        errors[name] = float(np.max(relative_error(analytic[name], numeric)))
    return errors


def grid_configs(grid=None):
    grid = {**GRID, **(grid or {})}
    keys = list(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        yield dict(zip(keys, values))


def _grid_network(point, rng):
    cfg = NetworkConfig(
        num_perspectives=point["m"], input_dim=point["d"], num_classes=point["k"],
        cell_kind=point["cell"], bidirectional=point["bidirectional"],
        hidden_dim=point["hidden"], attention=True, dropout_rate=0.0,
    )
    net = Network.init(cfg, rng)
    # non-zero biases so the bias paths are exercised away from symmetric points
    for name, theta in net.parameters().items():
        if name.endswith(".b") or name.endswith("b_a") or name.endswith("b_out"):
            theta[:] = rng.uniform(theta.shape) - 0.5
    X = rng.normal((2, point["m"], point["n"], point["d"]))
    y = rng.integers(point["k"], 2)
    return net, X, y


def gradcheck(seed=0, grid=None, sanity=True):
    """Run the finite-difference check over the configuration grid.

    Returns a list of :class:`GradcheckRow`; with ``sanity`` the first row is
    an all-zero-parameter network.
    """
    rng = Rng(seed)
    rows = []
    if sanity:
        cfg = NetworkConfig(num_perspectives=2, input_dim=2, num_classes=3, hidden_dim=2, dropout_rate=0.0)
        net = Network.zeros(cfg)
        X = rng.normal((2, 2, 3, 2))
        rows.append(GradcheckRow("sanity zero-parameter m=2 h=2 n=3 bi",
                                 check_network(net, X, np.array([0, 1]))))
    for point in grid_configs(grid):
        net, X, y = _grid_network(point, rng)
        label = "cell={cell} m={m} hidden={hidden} n={n} d={d} k={k} {dir}".format(
            dir="bi" if point["bidirectional"] else "uni", **point)
        rows.append(GradcheckRow(label, check_network(net, X, y)))
    return rows

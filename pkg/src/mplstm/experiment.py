"""Experiment configs, MPM1 model files and metrics CSV output.

MPM1 layout (little-endian)::

    4 bytes   magic b"MPM1"
    u32       length L of the JSON header
    L bytes   UTF-8 JSON: {"experiment": {...}, "shape": {"m", "d", "k"}}
    f64[...]  every parameter tensor, C order, in ``model.parameters()`` order

Parameter order for a network is ``fwd.w_s, fwd.w_h, fwd.w_c, fwd.b``, then
the same four ``bwd.*`` tensors when bidirectional, then ``head.w_a,
head.v_a, head.b_a`` when attention is on, then ``head.w_out, head.b_out``.
Score fusion stores its members back to back (``p0.*``, ``p1.*``, ...).
"""

import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .network import CELL_KINDS, ConfigError, Network, NetworkConfig, ScoreFusion
from .training import TrainConfig

MODEL_MAGIC = b"MPM1"
CSV_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc"

_KEY_TYPES = {"cell": str, "fusion": str, "bidirectional": bool, "attention": bool,
              "hidden": int, "batch_size": int, "epochs": int, "seed": int}


class ModelFormatError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    cell: str = "mp"
    fusion: str = "joint"
    bidirectional: bool = True
    hidden: int = 32
    attention: bool = True
    dropout: float = 0.1
    lr: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            want = _KEY_TYPES.get(f.name, (int, float))
            # bool is an int subclass; only accept it where a bool is wanted
            if not isinstance(value, want) or (isinstance(value, bool) and want is not bool):
                raise ConfigError(f"config key {f.name!r} has bad value {value!r}")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell {self.cell!r}")
        if min(self.hidden, self.batch_size, self.epochs) < 1 or self.seed < 0:
            raise ConfigError("hidden, batch_size and epochs must be >= 1, seed >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.lr < 0 or not 0.0 <= self.rho < 1.0 or self.epsilon <= 0:
            raise ConfigError("need lr >= 0, 0 <= rho < 1 and epsilon > 0")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self):
        return asdict(self)

    def network_config(self, m, d, k):
        return NetworkConfig(
            num_perspectives=m, input_dim=d, num_classes=k, cell_kind=self.cell,
            fusion_mode=self.fusion, bidirectional=self.bidirectional, hidden_dim=self.hidden,
            attention=self.attention, dropout_rate=float(self.dropout),
        )

    def train_config(self):
        return TrainConfig(batch_size=self.batch_size, num_epochs=self.epochs, lr=float(self.lr),
                           rho=float(self.rho), eps=float(self.epsilon),
                           dropout_rate=float(self.dropout), seed=self.seed)


def _empty_model(net_cfg):
    if net_cfg.fusion_mode == "score":
        return ScoreFusion.zeros(net_cfg)
    return Network.zeros(net_cfg)


def save_model(path, model, experiment):
    cfg = model.config
    header = {
        "experiment": experiment.to_dict(),
        "shape": {"m": cfg.num_perspectives, "d": cfg.input_dim, "k": cfg.num_classes},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for theta in model.parameters().values():
            f.write(np.ascontiguousarray(theta, dtype="<f8").tobytes())


def load_model(path):
    """Returns ``(model, experiment_config)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not an MPM1 file")
    if len(raw) < 8:
        raise ModelFormatError(f"{path}: truncated header")
    (length,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + length:
        raise ModelFormatError(f"{path}: truncated config block")
    try:
        header = json.loads(raw[8:8 + length].decode("utf-8"))
        experiment = ExperimentConfig.from_dict(header["experiment"])
        shape = header["shape"]
        net_cfg = experiment.network_config(int(shape["m"]), int(shape["d"]), int(shape["k"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad embedded config ({exc})") from None
    model = _empty_model(net_cfg)
    params = model.parameters()
    need = 8 * sum(theta.size for theta in params.values())
    payload = raw[8 + length:]
    if len(payload) != need:
        raise ModelFormatError(f"{path}: {len(payload)} parameter bytes, config implies {need}")
    offset = 0
    for theta in params.values():
        theta[...] = np.frombuffer(payload, dtype="<f8", count=theta.size, offset=offset).reshape(theta.shape)
        offset += 8 * theta.size
    return model, experiment


def format_real(x):
    return f"{x:.6g}"


def emit_metrics_csv(path, rows):
    """Write ``(epoch, train_loss, train_acc, val_loss, val_acc)`` rows."""
    if not rows:
        raise ValueError("no metrics rows to write")
    lines = [CSV_HEADER]
    for epoch, *values in rows:
        lines.append(",".join([str(int(epoch))] + [format_real(v) for v in values]))
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def read_metrics_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = []
        for line in f:
            epoch, *values = line.strip().split(",")
            rows.append((int(epoch), *map(float, values)))
    return rows

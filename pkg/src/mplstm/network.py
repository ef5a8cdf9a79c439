"""Recurrent stacks, fusion baselines, attention pooling and the classifier head.

A :class:`Network` runs mini-batches shaped ``(batch, m, n, d)``: sample,
perspective, instance, feature. Joint fusion feeds all perspectives to a
multi-perspective cell; the feature-fusion baselines reshape the batch into a
single perspective first and use a peephole LSTM. :class:`ScoreFusion`
averages the class distributions of per-perspective networks.
"""

from dataclasses import dataclass, field

import numpy as np

from .cells import AblationKind, CellParams, cell_backward, cell_forward
from .mathcore import DTYPE, ShapeError, init_glorot, softmax, tanh_act

CELL_KINDS = {
    "mp": AblationKind.FULL,
    "vanilla": AblationKind.FULL,
    "ablation_a": AblationKind.MODEL_A,
    "ablation_b": AblationKind.MODEL_B,
    "ablation_c": AblationKind.MODEL_C,
}
FUSION_MODES = ("joint", "feature_dim", "feature_time", "score")
PROB_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class ValidationError(ValueError):
    """Input sequences violate the synchronised multi-perspective layout."""


class NoPerspectivesError(ValidationError):
    pass


class EmptySequenceError(ValidationError):
    pass


class RaggedSequenceError(ValidationError):
    pass


class FeatureDimError(ValidationError):
    pass


def validate_perspectives(perspectives):
    """Check ``m`` sequences of ``n`` equal-dimension instances; return an (m, n, d) array."""
    if isinstance(perspectives, np.ndarray):
        if perspectives.ndim != 3:
            raise ValidationError(f"expected an (m, n, d) array, got shape {perspectives.shape}")
        perspectives = list(perspectives)
    if len(perspectives) == 0:
        raise NoPerspectivesError("sample has no perspectives (m = 0)")
    lengths = [len(seq) for seq in perspectives]
    if lengths[0] == 0:
        raise EmptySequenceError("perspective sequences are empty (n = 0)")
    if len(set(lengths)) != 1:
        raise RaggedSequenceError(f"perspective sequences have different lengths {lengths}")
    dims = {np.asarray(x).shape for seq in perspectives for x in seq}
    if len(dims) != 1 or len(next(iter(dims))) != 1 or next(iter(dims))[0] == 0:
        raise FeatureDimError(f"instances have inconsistent feature shapes {sorted(dims)}")
    return np.asarray(perspectives, dtype=DTYPE)


@dataclass
class SequenceSample:
    perspectives: np.ndarray  # (m, n, d)
    label: int = 0

    def __post_init__(self):
        self.perspectives = validate_perspectives(self.perspectives)

    @property
    def num_perspectives(self):
        return self.perspectives.shape[0]

    @property
    def length(self):
        return self.perspectives.shape[1]


@dataclass
class NetworkConfig:
    num_perspectives: int
    input_dim: int
    num_classes: int
    cell_kind: str = "mp"
    fusion_mode: str = "joint"
    bidirectional: bool = True
    hidden_dim: int = 32
    attention: bool = True
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"unknown cell kind {self.cell_kind!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        for name in ("num_perspectives", "input_dim", "num_classes", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate {self.dropout_rate} outside [0, 1)")
        if self.fusion_mode == "joint":
            if self.cell_kind == "vanilla" and self.num_perspectives != 1:
                raise ConfigError("joint fusion needs an mp or ablation cell when m > 1")
        elif self.cell_kind != "vanilla":
            raise ConfigError(f"{self.fusion_mode} fusion runs vanilla cells, got {self.cell_kind!r}")

    @property
    def ablation(self):
        return CELL_KINDS[self.cell_kind]

    @property
    def directions(self):
        return 2 if self.bidirectional else 1

    @property
    def output_dim(self):
        return self.hidden_dim * self.directions

    @property
    def attention_dim(self):
        return self.hidden_dim

    def cell_shape(self):
        """(perspectives, input dim) seen by the recurrent cell."""
        m, d = self.num_perspectives, self.input_dim
        if self.fusion_mode == "feature_dim":
            return 1, m * d
        if self.fusion_mode in ("feature_time", "score"):
            return 1, d
        return m, d


@dataclass
class HeadParams:
    w_out: np.ndarray  # (K, h')
    b_out: np.ndarray  # (K,)
    w_a: np.ndarray = None  # (a, h'); None when attention is off
    v_a: np.ndarray = None  # (a,)
    b_a: np.ndarray = None  # (a,)

    @property
    def attention(self):
        return self.w_a is not None

    def arrays(self):
        out = {}
        if self.attention:
            out.update(w_a=self.w_a, v_a=self.v_a, b_a=self.b_a)
        out.update(w_out=self.w_out, b_out=self.b_out)
        return out

    @classmethod
    def zeros(cls, out_dim, num_classes, attention_dim=None):
        head = cls(np.zeros((num_classes, out_dim)), np.zeros(num_classes))
        if attention_dim:
            head.w_a = np.zeros((attention_dim, out_dim))
            head.v_a = np.zeros(attention_dim)
            head.b_a = np.zeros(attention_dim)
        return head

    @classmethod
    def glorot(cls, rng, out_dim, num_classes, attention_dim=None):
        head = cls.zeros(out_dim, num_classes, attention_dim)
        if attention_dim:
            head.w_a[:] = init_glorot(rng, attention_dim, out_dim)
            head.v_a[:] = init_glorot(rng, 1, attention_dim)[0]
        head.w_out[:] = init_glorot(rng, num_classes, out_dim)
        return head


@dataclass
class ForwardTrace:
    """Batched forward record (leading axis is the sample)."""

    inputs: np.ndarray  # cell input, (B, m', n', d')
    step_traces: list  # per direction, StepTraces in processing order
    outputs: np.ndarray  # (B, n', h') per-instance outputs H_i (fwd ; bwd)
    dropped: np.ndarray  # outputs after dropout
    mask: np.ndarray  # inverted-dropout multipliers, or None
    scores_hidden: np.ndarray  # tanh(W_a H + b_a), or None without attention
    weights: np.ndarray  # (B, n') attention weights
    context: np.ndarray  # (B, h')
    logits: np.ndarray  # (B, K)
    probs: np.ndarray  # (B, K)
    extra: dict = field(default_factory=dict)


def run_direction(params, kind, X, reverse=False):
    """Unroll one direction over ``X`` (B, m, n, d) from zero state.

    Returns per-instance outputs (B, n, hidden) aligned to the input order and
    the step traces in processing order.
    """
    B, m, n, _ = X.shape
    h = params.hidden_dim
    h_prev = np.zeros((B, h))
    c_prev = np.zeros((B, h))
    cells_prev = np.zeros((m, B, h)) if kind is AblationKind.MODEL_B else None
    outs = np.empty((B, n, h))
    traces = []
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        tr = cell_forward(params, X[:, :, i, :], h_prev, c_prev, kind, cells_prev)
        traces.append(tr)
        h_prev, c_prev = tr.h, tr.c
        if cells_prev is not None:
            cells_prev = tr.cells
        outs[:, i] = tr.h
    return outs, traces


def backprop_direction(params, kind, traces, d_outs, grads, reverse=False):
    """BPTT through one direction; ``d_outs`` is (B, n, hidden)."""
    B, n, h = d_outs.shape
    m = params.num_perspectives
    dh = np.zeros((B, h))
    dc = np.zeros((B, h))
    dcells = np.zeros((m, B, h)) if kind is AblationKind.MODEL_B else None
    order = range(n) if reverse else range(n - 1, -1, -1)
    for tr, i in zip(reversed(traces), order):
        dh, dc, dcells_prev = cell_backward(params, tr, d_outs[:, i] + dh, dc, dcells, grads)
        if dcells is not None:
            # Model B carries C as the last intermediate state
            dcells_prev[-1] += dc
            dcells = dcells_prev
            dc = np.zeros((B, h))
    return grads


def unroll(params, config, sample):
    """Per-instance joint outputs ``[H_1 .. H_n]`` of a single sample."""
    X = _as_batch(sample)
    outs, _ = run_direction(params, config.ablation, X)
    return list(outs[0])


def bidirectional_unroll(params_fwd, params_bwd, config, sample):
    """Per-instance concatenations ``[H_fwd_i ; H_bwd_i]``."""
    X = _as_batch(sample)
    fwd, _ = run_direction(params_fwd, config.ablation, X)
    bwd, _ = run_direction(params_bwd, config.ablation, X, reverse=True)
    return list(np.concatenate([fwd, bwd], axis=-1)[0])


def attention_pool(head, hs):
    """Additive attention over instance outputs ``hs``; returns (context, weights)."""
    hs = np.asarray(hs, dtype=DTYPE)
    if hs.ndim != 2 or hs.shape[0] < 1:
        raise ShapeError(f"attention_pool needs a non-empty (n, h') stack, got {hs.shape}")
    u = tanh_act(hs @ head.w_a.T + head.b_a)
    weights = softmax(u @ head.v_a)
    return weights @ hs, weights


def classify(head, context):
    context = np.asarray(context, dtype=DTYPE)
    if context.shape[-1] != head.w_out.shape[1]:
        raise ShapeError(f"context dim {context.shape[-1]} != classifier input {head.w_out.shape[1]}")
    logits = context @ head.w_out.T + head.b_out
    return logits, softmax(logits)


def cross_entropy(probs, label):
    probs = np.asarray(probs, dtype=DTYPE)
    if not 0 <= int(label) < probs.shape[-1]:
        raise IndexError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[int(label)], PROB_FLOOR)))


def mean_cross_entropy(probs, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError(f"labels outside [0, {probs.shape[1]})")
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def _as_batch(sample):
    if isinstance(sample, SequenceSample):
        return sample.perspectives[None]
    return validate_perspectives(sample)[None]


class Network:
    """A uni- or bi-directional recurrent stack with pooling and softmax head."""

    def __init__(self, config, fwd, head, bwd=None):
        self.config = config
        self.fwd = fwd
        self.bwd = bwd
        self.head = head
        m, d = config.cell_shape()
        if (fwd.num_perspectives, fwd.input_dim, fwd.hidden_dim) != (m, d, config.hidden_dim):
            raise ShapeError("forward cell parameters do not match the config")
        if config.bidirectional != (bwd is not None):
            raise ShapeError("backward cell parameters present iff bidirectional")
        if head.attention != config.attention or head.w_out.shape != (config.num_classes, config.output_dim):
            raise ShapeError("head parameters do not match the config")

    @classmethod
    def init(cls, config, rng):
        m, d = config.cell_shape()
        h = config.hidden_dim
        fwd = CellParams.glorot(rng, m, d, h)
        bwd = CellParams.glorot(rng, m, d, h) if config.bidirectional else None
        a = config.attention_dim if config.attention else None
        head = HeadParams.glorot(rng, config.output_dim, config.num_classes, a)
        return cls(config, fwd, head, bwd)

    @classmethod
    def zeros(cls, config):
        m, d = config.cell_shape()
        h = config.hidden_dim
        bwd = CellParams.zeros(m, d, h) if config.bidirectional else None
        a = config.attention_dim if config.attention else None
        return cls(config, CellParams.zeros(m, d, h), HeadParams.zeros(config.output_dim, config.num_classes, a), bwd)

    def parameters(self):
        """Named parameter arrays in the fixed serialisation order."""
        out = {f"fwd.{k}": v for k, v in self.fwd.arrays().items()}
        if self.bwd is not None:
            out.update({f"bwd.{k}": v for k, v in self.bwd.arrays().items()})
        out.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        return out

    def cell_input(self, X):
        """Apply the fusion reshaping to a raw (B, m, n, d) batch."""
        X = np.asarray(X, dtype=DTYPE)
        cfg = self.config
        if X.ndim != 4 or X.shape[1] != cfg.num_perspectives or X.shape[3] != cfg.input_dim:
            raise ShapeError(
                f"batch shape {X.shape} does not match m={cfg.num_perspectives}, d={cfg.input_dim}"
            )
        if X.shape[2] < 1:
            raise EmptySequenceError("sequences are empty (n = 0)")
        B, m, n, d = X.shape
        if cfg.fusion_mode == "feature_dim":
            return X.transpose(0, 2, 1, 3).reshape(B, 1, n, m * d)
        if cfg.fusion_mode == "feature_time":
            return X.reshape(B, 1, m * n, d)
        return X

    def forward(self, X, rng=None, dropout_rate=None):
        """Batched forward pass.

        Dropout is active only when ``rng`` is given; its rate defaults to the
        config's.
        """
        cfg = self.config
        rate = cfg.dropout_rate if dropout_rate is None else dropout_rate
        kind = cfg.ablation
        Xc = self.cell_input(X)
        outs, fwd_traces = run_direction(self.fwd, kind, Xc)
        traces = [fwd_traces]
        if self.bwd is not None:
            bwd_outs, bwd_traces = run_direction(self.bwd, kind, Xc, reverse=True)
            outs = np.concatenate([outs, bwd_outs], axis=-1)
            traces.append(bwd_traces)

        mask = None
        dropped = outs
        if rng is not None and rate > 0.0:
            keep = 1.0 - rate
            mask = (rng.uniform(outs.shape) < keep) / keep
            dropped = outs * mask

        B, n, _ = dropped.shape
        u = None
        if self.head.attention:
            u = tanh_act(dropped @ self.head.w_a.T + self.head.b_a)
            weights = softmax(u @ self.head.v_a, axis=1)
        else:
            weights = np.full((B, n), 1.0 / n)
        context = np.einsum("bn,bnh->bh", weights, dropped)
        logits = context @ self.head.w_out.T + self.head.b_out
        probs = softmax(logits)
        return ForwardTrace(Xc, traces, outs, dropped, mask, u, weights, context, logits, probs)

    def predict_proba(self, X):
        return self.forward(X).probs

    def loss(self, X, labels, rng=None):
        return mean_cross_entropy(self.forward(X, rng).probs, labels)

    def backward(self, trace, labels):
        """Gradients of the batch-mean cross-entropy, keyed like :meth:`parameters`."""
        labels = np.asarray(labels)
        B, K = trace.probs.shape
        if labels.shape != (B,):
            raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {B}")
        if K != self.config.num_classes or trace.context.shape[1] != self.config.output_dim:
            raise ShapeError("trace does not belong to this network")
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}

        d_logits = trace.probs.copy()
        d_logits[np.arange(B), labels] -= 1.0
        d_logits /= B
        grads["head.w_out"] += d_logits.T @ trace.context
        grads["head.b_out"] += d_logits.sum(axis=0)
        d_context = d_logits @ self.head.w_out

        d_dropped = trace.weights[:, :, None] * d_context[:, None, :]
        if self.head.attention:
            d_weights = np.einsum("bnh,bh->bn", trace.dropped, d_context)
            d_scores = trace.weights * (d_weights - np.sum(trace.weights * d_weights, axis=1, keepdims=True))
            u = trace.scores_hidden
            grads["head.v_a"] += np.einsum("bn,bna->a", d_scores, u)
            d_pre = d_scores[:, :, None] * self.head.v_a * (1.0 - u ** 2)
            grads["head.w_a"] += np.einsum("bna,bnh->ah", d_pre, trace.dropped)
            grads["head.b_a"] += d_pre.sum(axis=(0, 1))
            d_dropped += d_pre @ self.head.w_a

        d_outs = d_dropped if trace.mask is None else d_dropped * trace.mask
        h = self.config.hidden_dim
        kind = self.config.ablation
        fwd_grads = {k: grads[f"fwd.{k}"] for k in self.fwd.arrays()}
        backprop_direction(self.fwd, kind, trace.step_traces[0], d_outs[:, :, :h], fwd_grads)
        if self.bwd is not None:
            bwd_grads = {k: grads[f"bwd.{k}"] for k in self.bwd.arrays()}
            backprop_direction(self.bwd, kind, trace.step_traces[1], d_outs[:, :, h:], bwd_grads, reverse=True)
        return grads


class ScoreFusion:
    """Late fusion: one single-perspective network per view, probabilities averaged."""

    def __init__(self, config, models):
        if config.fusion_mode != "score":
            raise ConfigError("ScoreFusion needs fusion_mode 'score'")
        if len(models) != config.num_perspectives:
            raise ShapeError(f"{len(models)} models for {config.num_perspectives} perspectives")
        self.config = config
        self.models = list(models)

    @staticmethod
    def member_config(config):
        return NetworkConfig(
            num_perspectives=1, input_dim=config.input_dim, num_classes=config.num_classes,
            cell_kind="vanilla", fusion_mode="joint", bidirectional=config.bidirectional,
            hidden_dim=config.hidden_dim, attention=config.attention, dropout_rate=config.dropout_rate,
        )

    @classmethod
    def init(cls, config, rng):
        sub = cls.member_config(config)
        # member p draws from seed + p
        return cls(config, [Network.init(sub, rng.spawn(p)) for p in range(config.num_perspectives)])

    @classmethod
    def zeros(cls, config):
        sub = cls.member_config(config)
        return cls(config, [Network.zeros(sub) for _ in range(config.num_perspectives)])

    def parameters(self):
        out = {}
        for p, model in enumerate(self.models):
            out.update({f"p{p}.{k}": v for k, v in model.parameters().items()})
        return out

    def predict_proba(self, X):
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim != 4 or X.shape[1] != len(self.models):
            raise ShapeError(f"batch shape {X.shape} does not carry {len(self.models)} perspectives")
        return score_average([model.predict_proba(X[:, p:p + 1]) for p, model in enumerate(self.models)])


def score_average(prob_list):
    """Unweighted sum rule."""
    return np.mean(np.stack(prob_list), axis=0)


def feature_fusion_forward(network, sample):
    if network.config.fusion_mode not in ("feature_dim", "feature_time"):
        raise ConfigError("feature_fusion_forward needs a feature_dim or feature_time network")
    return network.forward(_as_batch(sample))


def score_fusion_predict(models, sample):
    """Average the distributions of per-perspective ``models`` on one sample."""
    X = _as_batch(sample)
    if len(models) != X.shape[1]:
        raise ShapeError(f"{len(models)} models for {X.shape[1]} perspectives")
    probs = score_average([model.predict_proba(X[:, p:p + 1])[0] for p, model in enumerate(models)])
    return probs

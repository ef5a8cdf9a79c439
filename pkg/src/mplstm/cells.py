"""Multi-perspective LSTM cell, its single-perspective baseline and ablations.

One cell step folds the ``m`` perspective inputs of an instance into a single
joint cell state. Every perspective ``p`` owns four gate parameter sets
(input, forget, output, candidate), each reading the perspective input, the
previous joint hidden state ``H`` and the previous joint cell state ``C``
through full peephole matrices. The intermediate states are chained::

    c1 = F1 * C_prev + I1 * G1
    cp = Fp * c(p-1) + Ip * Gp        p = 2..m
    C  = cm
    H  = sum_p Op * tanh(C)

All gates read ``C_prev`` (including the output gate), so ``m = 1`` is exactly
a peephole LSTM and ``vanilla_cell_step`` is defined as that special case.

The ``cell_forward``/``cell_backward`` pair works on mini-batches and keeps
everything needed for backpropagation in a :class:`StepTrace`.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .mathcore import DTYPE, ShapeError, init_glorot, sigmoid, tanh_act

GATES = ("input", "forget", "output", "candidate")
_I, _F, _O, _G = range(4)


class ContractError(ValueError):
    """Raised when a caller omits state an operation needs."""


class AblationKind(enum.Enum):
    MODEL_A = "A"  # no C_prev term in the first intermediate state
    MODEL_B = "B"  # cp chains to the same perspective's previous-instance state
    MODEL_C = "C"  # C_prev replaced by zeros everywhere
    FULL = "full"


@dataclass
class PerspectiveGateParams:
    """Weights of one gate of one perspective (views into :class:`CellParams`)."""

    w_s: np.ndarray  # hidden x input
    w_h: np.ndarray  # hidden x hidden
    w_c: np.ndarray  # hidden x hidden, full peephole matrix
    b: np.ndarray  # hidden


@dataclass
class CellParams:
    """Parameters of one cell, stacked as ``[perspective, gate, ...]``.

    Gate index order is :data:`GATES`.
    """

    w_s: np.ndarray  # (m, 4, hidden, input)
    w_h: np.ndarray  # (m, 4, hidden, hidden)
    w_c: np.ndarray  # (m, 4, hidden, hidden)
    b: np.ndarray  # (m, 4, hidden)

    def __post_init__(self):
        m, four, h, d = self.w_s.shape
        if four != 4 or m < 1 or h < 1 or d < 1:
            raise ShapeError(f"w_s must have shape (m, 4, hidden, input), got {self.w_s.shape}")
        for name, shape in (("w_h", (m, 4, h, h)), ("w_c", (m, 4, h, h)), ("b", (m, 4, h))):
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")

    @property
    def num_perspectives(self):
        return self.w_s.shape[0]

    @property
    def input_dim(self):
        return self.w_s.shape[3]

    @property
    def hidden_dim(self):
        return self.w_s.shape[2]

    def gate(self, p, name):
        g = GATES.index(name)
        return PerspectiveGateParams(self.w_s[p, g], self.w_h[p, g], self.w_c[p, g], self.b[p, g])

    def arrays(self):
        return {"w_s": self.w_s, "w_h": self.w_h, "w_c": self.w_c, "b": self.b}

    def copy(self):
        return CellParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros(cls, m, input_dim, hidden_dim):
        h, d = hidden_dim, input_dim
        return cls(
            np.zeros((m, 4, h, d)), np.zeros((m, 4, h, h)), np.zeros((m, 4, h, h)), np.zeros((m, 4, h))
        )

    @classmethod
    def glorot(cls, rng, m, input_dim, hidden_dim):
        """Glorot-uniform weight matrices (one draw per gate matrix), zero biases."""
        params = cls.zeros(m, input_dim, hidden_dim)
        for p in range(m):
            for g in range(4):
                params.w_s[p, g] = init_glorot(rng, hidden_dim, input_dim)
                params.w_h[p, g] = init_glorot(rng, hidden_dim, hidden_dim)
                params.w_c[p, g] = init_glorot(rng, hidden_dim, hidden_dim)
        return params


@dataclass
class StepState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim, batch=None):
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class StepTrace:
    """Everything one step computed, batch-first where it has a batch axis.

    Per-perspective arrays (``inputs``, ``inp``, ``forget``, ``out``,
    ``cand``, ``cells``, ``hiddens``, ``chain_in``) are indexed
    ``[perspective, batch, ...]``.
    """

    kind: AblationKind
    inputs: np.ndarray
    h_prev: np.ndarray
    peek: np.ndarray  # C_prev as seen by the gates (zeros for Model C)
    chain_in: np.ndarray  # state each cp update multiplies by its forget gate
    inp: np.ndarray
    forget: np.ndarray
    out: np.ndarray
    cand: np.ndarray
    cells: np.ndarray  # intermediate states c1..cm
    tanh_c: np.ndarray
    h: np.ndarray
    batched: bool = field(default=True, repr=False)

    @property
    def hiddens(self):
        return self.out * self.tanh_c[None]

    @property
    def c(self):
        return self.cells[-1]

    def unbatched(self):
        """Drop the batch axis of a single-sample trace."""
        if not self.batched:
            return self
        sq = {}
        for name in ("inputs", "inp", "forget", "out", "cand", "cells", "chain_in"):
            sq[name] = getattr(self, name)[:, 0]
        for name in ("h_prev", "peek", "tanh_c", "h"):
            sq[name] = getattr(self, name)[0]
        return StepTrace(kind=self.kind, batched=False, **sq)


def cell_forward(params, S, h_prev, c_prev, kind=AblationKind.FULL, cells_prev=None):
    """Batched step.

    ``S`` is (B, m, d); ``h_prev``/``c_prev`` are (B, hidden); ``cells_prev``
    is (m, B, hidden) and only read by Model B.
    """
    m, _, h, d = params.w_s.shape
    B = S.shape[0]
    if S.shape[1:] != (m, d) or h_prev.shape != (B, h) or c_prev.shape != (B, h):
        raise ShapeError(
            f"cell step: inputs {S.shape}, h_prev {h_prev.shape}, c_prev {c_prev.shape} "
            f"do not match m={m}, input={d}, hidden={h}"
        )
    if kind is AblationKind.MODEL_B and cells_prev is None:
        raise ContractError("Model B needs the per-perspective states of the previous instance")

    peek = np.zeros_like(c_prev) if kind is AblationKind.MODEL_C else c_prev
    z = np.matmul(S.transpose(1, 0, 2), params.w_s.reshape(m, 4 * h, d).transpose(0, 2, 1))
    z += (h_prev @ params.w_h.reshape(m * 4 * h, h).T).reshape(B, m, 4 * h).transpose(1, 0, 2)
    if kind is not AblationKind.MODEL_C:
        z += (peek @ params.w_c.reshape(m * 4 * h, h).T).reshape(B, m, 4 * h).transpose(1, 0, 2)
    z += params.b.reshape(m, 1, 4 * h)
    z = z.reshape(m, B, 4, h)

    gates = sigmoid(z[:, :, :3])
    inp, forget, out = gates[:, :, _I], gates[:, :, _F], gates[:, :, _O]
    cand = tanh_act(z[:, :, _G])

    chain_in = np.empty((m, B, h))
    cells = np.empty((m, B, h))
    for p in range(m):
        if p == 0:
            first = kind in (AblationKind.FULL, AblationKind.MODEL_B)
            chain_in[0] = c_prev if first else 0.0
        elif kind is AblationKind.MODEL_B:
            chain_in[p] = cells_prev[p]
        else:
            chain_in[p] = cells[p - 1]
        cells[p] = forget[p] * chain_in[p] + inp[p] * cand[p]

    tanh_c = tanh_act(cells[-1])
    h_new = out.sum(axis=0) * tanh_c
    return StepTrace(kind, S.transpose(1, 0, 2), h_prev, peek, chain_in,
                     inp, forget, out, cand, cells, tanh_c, h_new)


def cell_backward(params, tr, dh, dc, dcells=None, grads=None):
    """Reverse of :func:`cell_forward`.

    ``dh`` and ``dc`` are the loss gradients w.r.t. the step's ``H`` and joint
    ``C`` (B, hidden); ``dcells`` (m, B, hidden) adds gradients w.r.t. the
    intermediate states (Model B threads them across instances). Parameter
    gradients are accumulated into ``grads`` (a dict like
    :meth:`CellParams.arrays`). Returns ``(dh_prev, dc_prev, dcells_prev)``
    where ``dcells_prev`` is None unless the kind is Model B.
    """
    m, _, h, d = params.w_s.shape
    B = dh.shape[0]
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    kind = tr.kind

    d_out = dh[None] * tr.tanh_c[None]
    d_tanh = dh * tr.out.sum(axis=0)
    dcell = np.zeros((m, B, h)) if dcells is None else dcells.copy()
    dcell[-1] += dc + d_tanh * (1.0 - tr.tanh_c ** 2)

    d_inp = np.empty((m, B, h))
    d_forget = np.empty((m, B, h))
    d_cand = np.empty((m, B, h))
    dc_prev = np.zeros((B, h))
    dcells_prev = np.zeros((m, B, h)) if kind is AblationKind.MODEL_B else None
    for p in range(m - 1, -1, -1):
        g = dcell[p]
        d_forget[p] = g * tr.chain_in[p]
        d_inp[p] = g * tr.cand[p]
        d_cand[p] = g * tr.inp[p]
        d_chain = g * tr.forget[p]
        if p == 0:
            if kind in (AblationKind.FULL, AblationKind.MODEL_B):
                dc_prev += d_chain
        elif kind is AblationKind.MODEL_B:
            dcells_prev[p] += d_chain
        else:
            dcell[p - 1] += d_chain

    dz = np.empty((m, B, 4, h))
    dz[:, :, _I] = d_inp * tr.inp * (1.0 - tr.inp)
    dz[:, :, _F] = d_forget * tr.forget * (1.0 - tr.forget)
    dz[:, :, _O] = d_out * tr.out * (1.0 - tr.out)
    dz[:, :, _G] = d_cand * (1.0 - tr.cand ** 2)
    dzf = dz.reshape(m, B, 4 * h)
    dzT = dzf.transpose(0, 2, 1)  # (m, 4h, B)

    grads["w_s"] += np.matmul(dzT, tr.inputs).reshape(m, 4, h, d)
    grads["w_h"] += np.matmul(dzT, tr.h_prev).reshape(m, 4, h, h)
    grads["b"] += dzf.sum(axis=1).reshape(m, 4, h)
    dz_flat = dzf.transpose(1, 0, 2).reshape(B, m * 4 * h)
    dh_prev = dz_flat @ params.w_h.reshape(m * 4 * h, h)
    if kind is not AblationKind.MODEL_C:
        grads["w_c"] += np.matmul(dzT, tr.peek).reshape(m, 4, h, h)
        dc_prev += dz_flat @ params.w_c.reshape(m * 4 * h, h)
    return dh_prev, dc_prev, dcells_prev


def _single(params, inputs, prev, kind, prev_per_perspective=None):
    m, h, d = params.num_perspectives, params.hidden_dim, params.input_dim
    if len(inputs) != m:
        raise ShapeError(f"expected {m} perspective inputs, got {len(inputs)}")
    vecs = [np.asarray(x, dtype=DTYPE) for x in inputs]
    if any(v.shape != (d,) for v in vecs):
        raise ShapeError(f"perspective inputs have shapes {[v.shape for v in vecs]}, expected ({d},)")
    S = np.stack(vecs)
    if S.shape != (m, d):
        raise ShapeError(f"perspective inputs have shape {S.shape}, expected ({m}, {d})")
    h_prev = np.asarray(prev.h, dtype=DTYPE)
    c_prev = np.asarray(prev.c, dtype=DTYPE)
    if h_prev.shape != (h,) or c_prev.shape != (h,):
        raise ShapeError(f"previous state has shapes {h_prev.shape}/{c_prev.shape}, expected ({h},)")
    cells_prev = None
    if kind is AblationKind.MODEL_B:
        if prev_per_perspective is None:
            raise ContractError("Model B needs prev_per_perspective")
        cells_prev = np.stack([np.asarray(c, dtype=DTYPE) for c in prev_per_perspective])
        if cells_prev.shape != (m, h):
            raise ShapeError(f"prev_per_perspective has shape {cells_prev.shape}, expected ({m}, {h})")
        cells_prev = cells_prev[:, None]
    tr = cell_forward(params, S[None], h_prev[None], c_prev[None], kind, cells_prev).unbatched()
    return StepState(tr.h, tr.c), tr


def mp_cell_step(params, inputs, prev):
    """One multi-perspective step on a single sample.

    ``inputs`` is a sequence of ``m`` input vectors. Returns the new
    :class:`StepState` and the :class:`StepTrace`.
    """
    return _single(params, inputs, prev, AblationKind.FULL)


def vanilla_cell_step(params, x, prev):
    """Peephole LSTM step: the ``m = 1`` multi-perspective step."""
    if params.num_perspectives != 1:
        raise ShapeError(f"vanilla cell needs m = 1 parameters, got m = {params.num_perspectives}")
    return _single(params, [x], prev, AblationKind.FULL)


def ablation_cell_step(kind, params, inputs, prev, prev_per_perspective=None):
    kind = AblationKind(kind)
    return _single(params, inputs, prev, kind, prev_per_perspective)

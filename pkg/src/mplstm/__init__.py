"""Multi-perspective LSTM networks with joint cell-state learning."""

from .cells import (
    AblationKind, CellParams, StepState, StepTrace, ablation_cell_step, mp_cell_step, vanilla_cell_step,
)
from .data import Dataset, ModSumSpec, gen_modsum, read_dataset, split_batches, write_dataset
from .mathcore import Rng, affine, init_glorot, rng_uniform, sigmoid, softmax, tanh_act
from .network import (
    ForwardTrace, HeadParams, Network, NetworkConfig, ScoreFusion, SequenceSample, attention_pool,
    bidirectional_unroll, classify, cross_entropy, feature_fusion_forward, score_fusion_predict, unroll,
)
from .training import (
    OptimizerState, TrainConfig, evaluate, fit, gradcheck, rmsprop_step, train_epoch,
)

__version__ = "0.1.0"

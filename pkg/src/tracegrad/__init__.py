"""Trace-supervised, gradient-induced equivariant Hamiltonian regression."""

from .autodiff import Node, Tape
from .block import BlockParams, DirectSumSpec, EquivariantFeature, block_forward, grad_induce
from .data import DatasetRecord, generate_dataset, generate_splits, load_dataset, oracle_blocks, save_dataset
from .errors import (
    CapabilityError,
    ConfigurationError,
    DiagnosticError,
    DivergenceError,
    GenerationError,
    LoadError,
    ParameterError,
    TraceGradError,
    UsageError,
)
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .so3 import Rotation, cg_decompose, cg_recompose, random_rotation, real_sph_harm, trace_label, wigner_d
from .structures import DEFAULT_BASIS, AtomicSystem, OrbitalBasisSpec, PairBlockSet, build_graph
from .training import LossBreakdown, MetricReport, TrainConfig, compute_loss, evaluate, run_ablation, train

__version__ = "0.1.0"

"""Temporal knowledge-graph completion with k-dimensional rotation-scaling embeddings."""
from .data import (FilterIndex, RawQuadruple, Vocab, build_filter_index, build_vocab,
                   encode_dataset, generate_synthetic_kg, parse_quadruple_file)
from .evaluation import MetricsReport, evaluate, rank_query
from .params import ModelConfig, ModelParams, init_model, load_checkpoint, save_checkpoint
from .rotor import apply_rotor, apply_rowwise, inner_product, score, score_all_tails
from .training import LossBreakdown, TrainConfig, batch_loss, fit, grad_step

__version__ = "0.1.0"

"""Coupled structured sparsification of a small numpy transformer."""

from .model import CoupledPair, Model, ModelConfig, coupled_pairs, param_count
from .sparsifier import BudgetInfeasible, SparsifySchedule, coupled_remove, score_pair, select_removals
from .trainer import AdamState, CharCorpus, TrainConfig, prune_pretrained, train

__all__ = [
    "AdamState", "BudgetInfeasible", "CharCorpus", "CoupledPair", "Model", "ModelConfig", "SparsifySchedule",
    "TrainConfig", "coupled_pairs", "coupled_remove", "param_count", "prune_pretrained", "score_pair",
    "select_removals", "train",
]

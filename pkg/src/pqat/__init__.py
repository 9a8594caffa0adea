"""Adversarial training for reading comprehension with virtual passage/question
perturbation tables, at desk scale."""

from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .data import Example, Vocab, build_batch, gen_choice_task, gen_kv_task, inject_distractor
from .model import MRCModel, ModelConfig, predict_span
from .perturb import EmbeddingSet, Role, compose, renormalize
from .training import TrainConfig, Trainer, evaluate, train

__version__ = "0.1.0"

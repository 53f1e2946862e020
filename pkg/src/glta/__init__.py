"""Graph-aligned language-model recommendation on a numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import SyntheticConfig, generate_synthetic, load_dataset
from .graph import GraphConfig, InteractionGraph, bpr_pretrain, lightgcn_propagate
from .metrics import MetricReport, evaluate, ndcg_at_k, precision_at_k, split_dataset

__version__ = "0.1.0"

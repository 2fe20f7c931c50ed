"""High-resolution ViT inference with windowed sparse attention and token pruning."""

from .cost import CostReport, allowed_pair_count, max_resolution_under_budget, predict
from .evaluation import FeatureSet, knn_classify, knn_predict, metrics
from .layout import TokenLayout
from .model import Checkpoint, ModelConfig
from .numeric import AllocationMeter
from .pruning import PruneMap, PruningPlan, prune_map, prune_tokens
from .sparse import SparsityPattern, build_sparsity_pattern, export_mask, sparse_attention
from .vit import InferenceOutput, Mode, Model, dense_attention

__version__ = "0.1.0"

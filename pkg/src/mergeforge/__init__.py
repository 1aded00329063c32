"""Merge fine-tuned expert checkpoints, search merge recipes, and analyse benchmark gains."""

__version__ = "0.1.0"

from .tensor_store import DType, Tensor, TensorFileError, WeightMap, load_weights, store_weights
from .merge_ops import (
    BreadcrumbsParams,
    DareParams,
    MergeError,
    SlerpParams,
    TiesParams,
    breadcrumbs_merge,
    dare_preprocess,
    merge_model,
    slerp_merge,
    task_arithmetic_merge,
    task_vectors,
    ties_merge,
)
from .recipe import Genome, MergeRecipe, genome_to_recipe, load_recipe, parse_recipe, recipe_to_genome

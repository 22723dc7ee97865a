"""Meta-learned pixel reweighting of initialized and pseudo labels for
semi-supervised 2D segmentation, on a small numpy autodiff engine."""
from .data import Dataset, GenConfig, generate, generate_splits, load, save
from .harness import ExperimentConfig, dump_weight_maps, load_config, run_ablation, run_experiment
from .meta import HyperConfig, clamp_normalize, meta_weight_maps, mlb_step
from .metrics import MetricsReport, dice, evaluate, jaccard, surface_distances
from .model import forward, init_params

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GenConfig", "generate", "generate_splits", "load", "save",
    "ExperimentConfig", "dump_weight_maps", "load_config", "run_ablation", "run_experiment",
    "HyperConfig", "clamp_normalize", "meta_weight_maps", "mlb_step",
    "MetricsReport", "dice", "evaluate", "jaccard", "surface_distances",
    "forward", "init_params",
]

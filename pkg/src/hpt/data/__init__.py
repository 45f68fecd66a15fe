from .dataset import (Episode, NormStats, TrajectoryDataset, compute_stats, load_dataset, normalize_action,
                      normalize_proprio, unnormalize_action, write_dataset)
from .sampling import (Batch, dataset_probs, eval_batches, limit_episodes, make_batch, sample_dataset_index,
                       split_train_val)
from .synthetic import TEMPLATES, SyntheticTemplate, ToyEnv, gen_synthetic_embodiment, get_template

__all__ = [
    "Batch", "Episode", "NormStats", "SyntheticTemplate", "TEMPLATES", "ToyEnv", "TrajectoryDataset",
    "compute_stats", "dataset_probs", "eval_batches", "gen_synthetic_embodiment", "get_template",
    "limit_episodes", "load_dataset", "make_batch", "normalize_action", "normalize_proprio",
    "sample_dataset_index", "split_train_val", "unnormalize_action", "write_dataset",
]

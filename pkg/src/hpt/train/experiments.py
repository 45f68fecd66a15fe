"""Scaling sweeps and the four-way transfer baseline comparison."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from ..data.dataset import TrajectoryDataset
from ..data.sampling import limit_episodes, split_train_val
from ..data.synthetic import ToyEnv, get_template
from ..errors import ConfigError
from ..model import HptModel, ModelConfig
from ..rng import RngState
from .evaluate import HptPolicy, rollout
from .loop import TRANSFER_MODES, TrainConfig, TransferConfig, config_hash, pretrain, train_loss, \
    transfer

log = logging.getLogger(__name__)

SCALING_COLUMNS = ["run_id", "config_hash", "n_datasets", "max_traj", "model_size", "width", "depth",
                   "batch_size", "steps", "seed", "final_train_loss", "avg_val_loss",
                   "per_dataset_val_losses", "wall_seconds", "status"]

GRID_KEYS = ("n_datasets", "max_traj", "model_size", "batch_size", "steps", "seed")


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product over the list-valued keys; scalars are held fixed."""
    axes = {k: (v if isinstance(v, (list, tuple)) else [v]) for k, v in grid.items()}
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def build_model(size: str, datasets: list[TrajectoryDataset], seed: int, **overrides) -> HptModel:
    cfg = ModelConfig.from_size(size, **overrides)
    rng = RngState(seed).child("model-init")
    model = HptModel(cfg, rng.child("trunk"))
    for ds in datasets:
        model.register_embodiment(ds.spec, rng.child(f"embodiment:{ds.spec.id}"))
    return model


def prepare_splits(corpus: list[TrajectoryDataset], val_max: int = 200,
                   seed: int = 0) -> list[tuple[TrajectoryDataset, TrajectoryDataset]]:
    return [split_train_val(ds, val_max, seed) for ds in corpus]


def _fmt(x: float) -> str:
    return repr(float(x))


def run_scaling_experiment(grid: dict, corpus: list[TrajectoryDataset], out_dir=None,
                           base: TrainConfig | None = None, val_max: int = 200,
                           model_overrides: dict | None = None) -> list[dict]:
    """One full pre-training run plus evaluation per grid point.

    Validation splits are made once from the full corpus, so every point is
    scored on the same held-out episodes; ``max_traj`` truncates only the
    training halves. A failing point becomes a row with a non-``ok`` status.
    """
    base = base or TrainConfig()
    model_overrides = model_overrides or {}
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}; allowed {list(GRID_KEYS)}", "scale.grid")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    points = expand_grid({"n_datasets": len(corpus), "max_traj": None, "model_size": base.model_size,
                          "batch_size": base.batch_size, "steps": base.total_steps, "seed": base.seed,
                          **grid})
    rows = []
    for i, pt in enumerate(points):
        run_id = f"run{i:03d}"
        chosen = corpus[:int(pt["n_datasets"])]
        chash = config_hash({"point": pt, "train": base.to_dict(), "model_overrides": model_overrides,
                             "data": [d.name for d in chosen], "val_max": val_max})
        row = {"run_id": run_id, "config_hash": chash, "n_datasets": pt["n_datasets"],
               "max_traj": "" if pt["max_traj"] is None else pt["max_traj"], "model_size": pt["model_size"],
               "width": "", "depth": "", "batch_size": pt["batch_size"], "steps": pt["steps"],
               "seed": pt["seed"], "final_train_loss": "", "avg_val_loss": "",
               "per_dataset_val_losses": "", "wall_seconds": "", "status": "ok"}
        start = time.perf_counter()
        try:
            cfg = replace(base, batch_size=int(pt["batch_size"]), total_steps=int(pt["steps"]),
                          seed=int(pt["seed"]), model_size=str(pt["model_size"]),
                          warmup_steps=base.warmup_steps if base.total_steps == pt["steps"] else None)
            mcfg = ModelConfig.from_size(cfg.model_size, **model_overrides)
            row["width"], row["depth"] = mcfg.width, mcfg.depth
            splits = [(limit_episodes(tr, pt["max_traj"]), va)
                      for tr, va in prepare_splits(chosen, val_max, cfg.seed)]
            model = build_model(cfg.model_size, [tr for tr, _ in splits], cfg.seed, **model_overrides)
            run_dir = out / run_id if out is not None else None
            result = pretrain(cfg, splits, model, run_dir)
            report = result.final_report
            row["final_train_loss"] = _fmt(train_loss(result, [tr for tr, _ in splits]))
            row["avg_val_loss"] = _fmt(report.average)
            row["per_dataset_val_losses"] = ";".join(f"{k}={_fmt(v)}" for k, v in report.per_dataset.items())
        except Exception as exc:  # a failed point must not stop the sweep
            log.warning("scaling point %s failed: %s", run_id, exc)
            row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        row["wall_seconds"] = f"{time.perf_counter() - start:.3f}"
        rows.append(row)
        if out is not None:
            write_scaling_csv(rows, out / "scaling.csv")
    return rows


def write_scaling_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SCALING_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- baselines ------------------------------------------------------------

def budget_hash(tconfig: TransferConfig) -> str:
    """Hash of everything except the init/freeze switches that distinguish the modes."""
    d = tconfig.to_dict()
    d.pop("mode")
    d.pop("freeze")
    return config_hash(d)


def compare_baselines(dataset: TrajectoryDataset | tuple[TrajectoryDataset, TrajectoryDataset],
                      checkpoint, n_rollouts: int = 50, tconfig: TransferConfig | None = None,
                      out_dir=None, rollout_seed: int = 0, template=None,
                      modes=TRANSFER_MODES) -> list[dict]:
    """Transfer in every mode with one budget, then roll each policy out in the task's ToyEnv."""
    tconfig = tconfig or TransferConfig()
    pair = dataset if isinstance(dataset, tuple) else split_train_val(dataset, seed=tconfig.seed)
    template = template or get_template(pair[0].meta.get("template", pair[0].spec.id))
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for mode in modes:
        cfg = replace(tconfig, mode=mode, freeze=None)
        run_dir = out / mode if out is not None else None
        result = transfer(cfg, pair, checkpoint, run_dir)
        policy = HptPolicy(result.model, pair[0].spec.id)
        res = rollout(policy, ToyEnv(template), n_rollouts, rollout_seed)
        rows.append({"mode": mode, "freeze_trunk": cfg.freeze_trunk, "steps": cfg.steps,
                     "batch_size": cfg.batch_size, "lr": cfg.lr, "seed": cfg.seed,
                     "budget_hash": budget_hash(cfg), "config_hash": result.config_hash,
                     "trainable_params": sum(result.model.registry[n].data.size
                                             for n in result.model.registry.trainable_names()),
                     "final_train_loss": train_loss(result, [pair[0]]),
                     "val_loss": result.final_report.average if result.final_report else float("nan"),
                     "success_rate": res.success_rate, "mean_steps_to_success": res.mean_steps_to_success,
                     "episodes": res.episodes, "trace": result.trace})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        table = [{k: v for k, v in r.items() if k != "trace"} for r in rows]
        (out / "baselines.json").write_text(json.dumps(table, indent=2) + "\n")
    return rows

"""Heterogeneous pre-training and frozen/finetuned transfer."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..checkpoint import load_checkpoint, save_checkpoint
from ..data.dataset import TrajectoryDataset
from ..data.sampling import dataset_probs, make_batch
from ..errors import ConfigError, NonFiniteLossError, RegistryError
from ..model import HptModel, ModelConfig
from ..nn import ForwardMode
from ..rng import RngState
from .evaluate import EvalReport, batch_loss, dataset_loss, eval_validation_loss
from .optim import OptimizerState, adamw_step, clip_grad_norm, cosine_lr

log = logging.getLogger(__name__)

REFERENCE_BATCH = 256


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    batch_size: int = 256
    total_steps: int = 1000
    warmup_steps: int | None = None     # default: 5% of total_steps
    min_lr_frac: float = 0.1
    workers: int = 4
    seed: int = 0
    model_size: str = "S"
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    huber_delta: float = 0.1
    sampling_temperature: float = 0.5
    eval_interval: int = 0              # 0: evaluate at start and end only
    max_grad_norm: float | None = None
    reference_batch: int = REFERENCE_BATCH

    def __post_init__(self):
        if self.batch_size < self.workers or self.workers < 1:
            raise ConfigError(f"batch {self.batch_size} must be >= workers {self.workers} >= 1", "train.batch")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1", "train.steps")
        if self.warmup >= self.total_steps and self.total_steps > 1:
            raise ConfigError("warmup must be shorter than the run", "train.warmup")

    @property
    def warmup(self) -> int:
        return int(0.05 * self.total_steps) if self.warmup_steps is None else self.warmup_steps

    @property
    def effective_lr(self) -> float:
        """Base rate scaled linearly with batch size relative to the reference batch."""
        return self.base_lr * self.batch_size / self.reference_batch

    @property
    def sub_batch(self) -> int:
        return self.batch_size // self.workers

    def lr_at(self, step: int) -> float:
        return cosine_lr(step, self.warmup, self.total_steps, self.effective_lr, self.min_lr_frac)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    lr: float
    train_loss: float


@dataclass
class RunResult:
    model: HptModel
    trace: list[TraceRow]
    reports: list[EvalReport] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    checkpoint: Path | None = None
    config_hash: str = ""

    @property
    def final_report(self) -> EvalReport | None:
        return self.reports[-1] if self.reports else None


def write_trace(trace: list[TraceRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss"])
        for r in trace:
            w.writerow([r.step, repr(r.lr), repr(r.train_loss)])


def _abort(model: HptModel, step: int, value: float, out_dir: Path | None):
    snap = None
    if out_dir is not None:
        snap = str(save_checkpoint(model, Path(out_dir) / f"nonfinite_step{step}.hptc"))
    raise NonFiniteLossError(f"non-finite training loss {value} at step {step}", step, snap)


def _train(model: HptModel, train_sets: list[TrajectoryDataset], val_sets: list[TrajectoryDataset],
           cfg: TrainConfig, names_for: Callable[[str], list[str]], out_dir: Path | None,
           chash: str, stop_at_train_loss: float | None = None) -> RunResult:
    rng = RngState(cfg.seed)
    pick_rng = rng.child("dataset-sampler")
    batch_rngs = [rng.child(f"batches:{i}") for i in range(len(train_sets))]
    drop_rng = rng.child("dropout")
    mode = ForwardMode(training=True, dropout=model.config.dropout, rng=drop_rng)
    probs = dataset_probs([ds.n_steps for ds in train_sets], cfg.sampling_temperature)
    opt = OptimizerState(cfg.weight_decay, tuple(cfg.betas), cfg.eps)
    stats = {ds.spec.id: ds.stats for ds in train_sets}
    for ds in train_sets:
        model.stats[ds.spec.id] = ds.stats

    reports = []
    if val_sets:
        reports.append(eval_validation_loss(model, val_sets, 0, chash, cfg.huber_delta))
    trace: list[TraceRow] = []
    for step in range(cfg.total_steps):
        lr = cfg.lr_at(step)
        picks = [pick_rng.choice(probs) for _ in range(cfg.workers)]
        total = None
        for k in picks:
            ds = train_sets[k]
            batch = make_batch(ds, cfg.sub_batch, batch_rngs[k], stats[ds.spec.id])
            loss = batch_loss(model, batch, mode, cfg.huber_delta)
            total = loss if total is None else T.add(total, loss)
        value = float(total.data)
        if not math.isfinite(value):
            _abort(model, step, value, out_dir)
        T.backward(total)
        active = []
        seen = set()
        for k in picks:
            for n in names_for(train_sets[k].spec.id):
                if n not in seen and model.registry.is_trainable(n):
                    seen.add(n)
                    active.append(n)
        if cfg.max_grad_norm:
            clip_grad_norm(model.registry, active, cfg.max_grad_norm)
        adamw_step(model.registry, opt, lr, active)
        trace.append(TraceRow(step, lr, value))
        done = step + 1 == cfg.total_steps
        if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0 and not done:
            if val_sets:
                reports.append(eval_validation_loss(model, val_sets, step + 1, chash, cfg.huber_delta))
            if stop_at_train_loss is not None and \
                    max(dataset_loss(model, ds, stats[ds.spec.id]) for ds in train_sets) <= stop_at_train_loss:
                log.info("train loss target reached at step %d", step + 1)
                break
    if val_sets:
        reports.append(eval_validation_loss(model, val_sets, len(trace), chash, cfg.huber_delta))
    model.registry.zero_grad()
    return RunResult(model, trace, reports, opt, None, chash)


def _finish(result: RunResult, out_dir, extra: dict) -> RunResult:
    if out_dir is None:
        return result
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.checkpoint = save_checkpoint(result.model, out / "checkpoint.hptc")
    write_trace(result.trace, out / "trace.csv")
    if result.final_report is not None:
        (out / "eval.json").write_text(json.dumps(
            {**result.final_report.to_dict(timing=False), **extra}, indent=2, sort_keys=True) + "\n")
    return result


def pretrain(config: TrainConfig, datasets: list[tuple[TrajectoryDataset, TrajectoryDataset]],
             model: HptModel, out_dir=None) -> RunResult:
    """Minimise the sum of per-dataset Huber losses with one shared trunk.

    ``datasets`` is a list of ``(train, val)`` pairs whose embodiments are
    already registered on ``model``. Every step draws ``config.workers``
    datasets by the size-tempered sampler, builds one homogeneous sub-batch
    from each, sums their losses, and takes one AdamW step over the trunk
    plus the stems/heads that were drawn.
    """
    for train, _ in datasets:
        if train.spec.id not in model.specs:
            raise RegistryError(f"embodiment {train.spec.id!r} is not registered on the model")
    chash = config_hash({"train": config.to_dict(), "model": model.config.to_dict(),
                         "data": [t.name for t, _ in datasets]})
    result = _train(model, [t for t, _ in datasets], [v for _, v in datasets if v.episodes],
                    config, model.param_names, Path(out_dir) if out_dir else None, chash)
    return _finish(result, out_dir, {"config_hash": chash})


# -- transfer -------------------------------------------------------------

TRANSFER_MODES = ("no_trunk", "scratch", "frozen", "finetuned")


@dataclass
class TransferConfig:
    mode: str = "frozen"
    freeze: bool | None = None          # default: True only for mode == "frozen"
    lr: float = 1e-5
    steps: int = 2000
    batch_size: int = 32
    warmup_steps: int | None = None
    min_lr_frac: float = 0.1
    weight_decay: float = 0.05
    stem_mlp_layers: int = 1
    seed: int = 0
    dropout: float | None = None        # default: keep the checkpoint's setting
    eval_interval: int = 0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.mode not in TRANSFER_MODES:
            raise ConfigError(f"mode must be one of {TRANSFER_MODES}, got {self.mode!r}", "transfer.mode")
        if self.mode == "no_trunk" and self.freeze:
            raise ConfigError("no_trunk mode has no trunk to freeze", "transfer.freeze")

    @property
    def freeze_trunk(self) -> bool:
        return self.mode == "frozen" if self.freeze is None else bool(self.freeze)

    def train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.lr, batch_size=self.batch_size, reference_batch=self.batch_size,
                           total_steps=self.steps, warmup_steps=self.warmup_steps,
                           min_lr_frac=self.min_lr_frac, workers=1, seed=self.seed,
                           weight_decay=self.weight_decay, eval_interval=self.eval_interval,
                           max_grad_norm=self.max_grad_norm)

    def to_dict(self) -> dict:
        return asdict(self)


def build_transfer_model(tconfig: TransferConfig, base: HptModel, rng: RngState) -> HptModel:
    """Fresh model for transfer; only the trunk may be carried over from ``base``."""
    cfg = ModelConfig.from_dict(base.config.to_dict())
    if tconfig.dropout is not None:
        cfg.dropout = tconfig.dropout
    if tconfig.mode == "no_trunk":
        cfg.use_trunk = False
        return HptModel(cfg, rng)
    if tconfig.mode == "scratch":
        model = HptModel(cfg, rng)
    else:
        if base.trunk is None:
            raise ConfigError("checkpoint has no trunk to transfer", "transfer.checkpoint")
        model = HptModel.skeleton(cfg)
        for name, t in base.registry.items("trunk"):
            model.registry[name].data = t.data.copy()
    if tconfig.freeze_trunk:
        model.registry.freeze("trunk")
    return model


def transfer(tconfig: TransferConfig, dataset: tuple[TrajectoryDataset, TrajectoryDataset],
             checkpoint, out_dir=None, stop_at_train_loss: float | None = None) -> RunResult:
    """Re-initialise stem and head for ``dataset``'s embodiment and train (G = 1).

    ``checkpoint`` is a path or an in-memory :class:`HptModel`; its width and
    depth define the architecture in every mode.
    """
    base = checkpoint if isinstance(checkpoint, HptModel) else load_checkpoint(checkpoint)
    train, val = dataset
    rng = RngState(tconfig.seed).child(f"transfer:{tconfig.mode}")
    model = build_transfer_model(tconfig, base, rng)
    model.register_embodiment(train.spec, rng, stem_mlp_layers=tconfig.stem_mlp_layers)
    cfg = tconfig.train_config()
    chash = config_hash({"transfer": tconfig.to_dict(), "model": model.config.to_dict(), "data": train.name})
    result = _train(model, [train], [val] if val is not None and val.episodes else [], cfg,
                    model.param_names, Path(out_dir) if out_dir else None, chash, stop_at_train_loss)
    return _finish(result, out_dir, {"config_hash": chash, "mode": tconfig.mode})


def train_loss(result: RunResult, datasets: list[TrajectoryDataset]) -> float:
    """Mean full-horizon loss over the fixed anchors of the training sets."""
    return float(np.mean([dataset_loss(result.model, ds, result.model.stats.get(ds.spec.id, ds.stats))
                          for ds in datasets]))

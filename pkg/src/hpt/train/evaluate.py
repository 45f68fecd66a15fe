"""Validation loss and closed-loop rollouts."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import tensor as T
from ..data.dataset import NormStats, TrajectoryDataset, unnormalize_action
from ..data.sampling import Batch, eval_batches, observation_window
from ..data.synthetic import ToyEnv
from ..errors import ConfigError, RoutingError
from ..model import EmbodimentSpec, HptModel
from ..nn import EVAL, ForwardMode
from ..rng import RngState

HUBER_DELTA = 0.1


@dataclass
class EvalReport:
    per_dataset: dict[str, float]
    average: float
    step: int = 0
    wall_time: float = 0.0
    config_hash: str = ""

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


def batch_loss(model: HptModel, batch: Batch, mode: ForwardMode = EVAL, delta: float = HUBER_DELTA):
    pred = model.forward(batch.embodiment_id, batch.proprio, batch.vision, mode)
    target = batch.actions.astype(pred.dtype, copy=False)
    return T.huber_loss(pred, target, delta, batch.element_mask().astype(pred.dtype))


def dataset_loss(model: HptModel, dataset: TrajectoryDataset, stats: NormStats | None = None,
                 delta: float = HUBER_DELTA) -> float:
    """Masked Huber over every fixed anchor of ``dataset`` (one mean, not a mean of chunk means)."""
    total = 0.0
    count = 0.0
    with T.no_grad():
        for batch in eval_batches(dataset, stats):
            loss = batch_loss(model, batch, EVAL, delta)
            n = float(batch.element_mask().sum())
            total += float(loss.data) * max(n, 1.0)
            count += n
    return total / max(count, 1.0)


def eval_validation_loss(model: HptModel, val_splits: list[TrajectoryDataset], step: int = 0,
                         config_hash: str = "", delta: float = HUBER_DELTA) -> EvalReport:
    start = time.perf_counter()
    per = {}
    for ds in val_splits:
        if not ds.episodes:
            raise ConfigError(f"validation split {ds.name!r} is empty", "data.val_max")
        stats = model.stats.get(ds.spec.id, ds.stats)
        key = ds.name if ds.name not in per else f"{ds.name}#{len(per)}"
        per[key] = dataset_loss(model, ds, stats, delta)
    avg = float(np.mean(list(per.values())))
    return EvalReport(per, avg, step, time.perf_counter() - start, config_hash)


# -- policies -------------------------------------------------------------

class HptPolicy:
    """Receding-horizon wrapper: last ``history`` frames in, first predicted action out."""

    def __init__(self, model: HptModel, embodiment_id: str, history: int = 2,
                 stats: NormStats | None = None):
        self.model = model
        self.spec = model.spec(embodiment_id)
        self.stats = stats if stats is not None else model.stats.get(embodiment_id)
        if self.stats is None:
            raise ConfigError(f"no normalisation statistics for {embodiment_id!r}", "stats")
        self.history = history

    def act(self, proprio_hist: np.ndarray, vision_hist: np.ndarray) -> np.ndarray:
        t = len(proprio_hist) - 1
        p, v, _ = observation_window(proprio_hist, vision_hist, t, self.history,
                                     self.spec.obs_horizon, self.stats)
        with T.no_grad():
            pred = self.model.forward(self.spec.id, p[None], v[None], EVAL)
        return unnormalize_action(pred.data[0, 0], self.stats)


class ExpertPolicy:
    """The environment's scripted expert, exposed through the policy interface."""

    def __init__(self, env: ToyEnv):
        self.env = env
        self.spec = env.spec

    def act(self, proprio_hist, vision_hist) -> np.ndarray:
        return self.env.expert_action()


@dataclass
class RolloutResult:
    episodes: int
    successes: int
    partial_scores: list[float] = field(default_factory=list)
    steps_to_success: list[int] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    @property
    def mean_steps_to_success(self) -> float:
        return float(np.mean(self.steps_to_success)) if self.steps_to_success else float("nan")

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "successes": self.successes, "success_rate": self.success_rate,
                "mean_steps_to_success": self.mean_steps_to_success,
                "partial_scores": self.partial_scores}


def _check_spec(a: EmbodimentSpec, b: EmbodimentSpec) -> None:
    if (a.proprio_dim, a.action_dim, a.vision_grid) != (b.proprio_dim, b.action_dim, b.vision_grid):
        raise RoutingError(f"policy embodiment {a.to_dict()} does not match environment {b.to_dict()}")


def rollout(policy, env: ToyEnv, n_episodes: int, seed: int) -> RolloutResult:
    """Closed loop: observe, act, step, until success or the step limit."""
    _check_spec(policy.spec, env.spec)
    rng = RngState(seed).child("rollout")
    result = RolloutResult(n_episodes, 0)
    for _ in range(n_episodes):
        env.reset(rng)
        d0 = env.distance
        props, visions = [], []
        ok = False
        while env.steps < env.template.max_steps:
            p, v = env.observe()
            props.append(p)
            visions.append(v)
            if env.step(policy.act(np.stack(props), np.stack(visions))):
                ok = True
                break
        result.partial_scores.append(float(np.clip(1.0 - env.distance / d0, 0.0, 1.0)))
        if ok:
            result.successes += 1
            result.steps_to_success.append(env.steps)
    return result

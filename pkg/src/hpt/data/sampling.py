"""Dataset mixing, batch construction with time masking, train/val splits."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import HptError
from ..rng import RngState
from .dataset import EmptyDatasetError, Episode, NormStats, TrajectoryDataset, compute_stats, \
    normalize_action, normalize_proprio


def dataset_probs(sizes, temperature: float = 0.5) -> np.ndarray:
    """P(k) proportional to size_k ** temperature (square root by default).

    Sizes are divided by their maximum before the power so that a common
    rescaling of all sizes yields bit-identical probabilities.
    """
    s = np.asarray(sizes, dtype=np.float64)
    if s.size == 0:
        raise ValueError("sample_dataset_index: no datasets to sample from")
    if (s < 1).any():
        raise ValueError(f"dataset sizes must be >= 1, got {list(sizes)}")
    w = np.power(s / s.max(), temperature)
    return w / w.sum()


def sample_dataset_index(sizes, rng: RngState, temperature: float = 0.5) -> int:
    return rng.choice(dataset_probs(sizes, temperature))


@dataclass
class Batch:
    embodiment_id: str
    proprio: np.ndarray    # [B, obs_horizon, d_p], normalised
    vision: np.ndarray     # [B, obs_horizon, Hf, Wf, Cf]
    actions: np.ndarray    # [B, action_horizon, d_a], normalised
    mask: np.ndarray       # [B, action_horizon]
    obs_len: np.ndarray    # [B]
    h_act: np.ndarray      # [B], sampled mask horizon before episode-end clipping

    def __len__(self) -> int:
        return len(self.mask)

    def element_mask(self) -> np.ndarray:
        """Mask broadcast to the action tensor shape."""
        return np.broadcast_to(self.mask[:, :, None], self.actions.shape).astype(self.actions.dtype)


def observation_window(proprio: np.ndarray, vision: np.ndarray, t: int, h_obs: int,
                       obs_horizon: int, stats: NormStats) -> tuple[np.ndarray, np.ndarray, int]:
    """Steps ``[t - h_obs + 1, t]`` clipped at 0, front zero-padded to ``obs_horizon``."""
    start = max(0, t - h_obs + 1)
    n = t - start + 1
    d_p = proprio.shape[1]
    p = np.zeros((obs_horizon, d_p), dtype=np.float32)
    v = np.zeros((obs_horizon,) + vision.shape[1:], dtype=np.float32)
    if d_p:
        p[obs_horizon - n:] = normalize_proprio(proprio[start:t + 1], stats)
    v[obs_horizon - n:] = vision[start:t + 1]
    return p, v, n


def action_window(ep: Episode, t: int, h_act: int, horizon: int, stats: NormStats):
    """Normalised actions ``[t, t + horizon)`` zero-padded past the end, and their mask."""
    d_a = ep.actions.shape[1]
    a = np.zeros((horizon, d_a), dtype=np.float32)
    avail = min(horizon, ep.length - t)
    a[:avail] = normalize_action(ep.actions[t:t + avail], stats)
    mask = np.zeros(horizon, dtype=np.float32)
    mask[:min(h_act, avail)] = 1.0
    return a, mask


def _stack(dataset: TrajectoryDataset, anchors, stats: NormStats) -> Batch:
    spec = dataset.spec
    rows = []
    for ep_i, t, h_obs, h_act in anchors:
        ep = dataset.episodes[ep_i]
        p, v, n = observation_window(ep.proprio, ep.vision, t, h_obs, spec.obs_horizon, stats)
        a, m = action_window(ep, t, h_act, spec.action_horizon, stats)
        rows.append((p, v, a, m, n, h_act))
    cols = list(zip(*rows))
    return Batch(spec.id, np.stack(cols[0]), np.stack(cols[1]), np.stack(cols[2]), np.stack(cols[3]),
                 np.asarray(cols[4]), np.asarray(cols[5]))


def _require_stats(dataset: TrajectoryDataset, stats: NormStats | None) -> NormStats:
    stats = stats if stats is not None else dataset.stats
    return stats if stats is not None else compute_stats(dataset)


def make_batch(dataset: TrajectoryDataset, batch_size: int, rng: RngState,
               stats: NormStats | None = None) -> Batch:
    """Uniform (episode, t) anchors with random observation length and action mask length."""
    if not dataset.episodes:
        raise EmptyDatasetError(f"{dataset.name}: cannot sample from an empty dataset")
    stats = _require_stats(dataset, stats)
    spec = dataset.spec
    lengths = np.array([ep.length for ep in dataset.episodes])
    cum = np.cumsum(lengths)
    flat = rng.integers(0, int(cum[-1]), size=batch_size)
    h_obs = rng.integers(1, spec.obs_horizon + 1, size=batch_size)
    h_act = rng.integers(1, spec.action_horizon + 1, size=batch_size)
    ep_idx = np.searchsorted(cum, flat, side="right")
    t = flat - np.concatenate([[0], cum[:-1]])[ep_idx]
    anchors = [(int(e), int(s), int(ho), int(ha)) for e, s, ho, ha in zip(ep_idx, t, h_obs, h_act)]
    return _stack(dataset, anchors, stats)


def eval_anchors(dataset: TrajectoryDataset, per_episode: int = 4) -> list[tuple[int, int]]:
    """Fixed (episode, t) pairs: ``per_episode`` evenly spaced steps of every episode."""
    out = []
    for i, ep in enumerate(dataset.episodes):
        ts = np.unique(np.round(np.linspace(0, ep.length - 1, per_episode)).astype(int))
        out.extend((i, int(t)) for t in ts)
    return out


def eval_batches(dataset: TrajectoryDataset, stats: NormStats | None = None, chunk: int = 256):
    """Deterministic full-history, full-horizon batches over :func:`eval_anchors`."""
    stats = _require_stats(dataset, stats)
    spec = dataset.spec
    anchors = [(e, t, spec.obs_horizon, spec.action_horizon) for e, t in eval_anchors(dataset)]
    for i in range(0, len(anchors), chunk):
        yield _stack(dataset, anchors[i:i + chunk], stats)


class SplitError(HptError, ValueError):
    pass


def val_count(n_episodes: int, val_max: int = 200) -> int:
    return max(0, min(val_max, (n_episodes * 20) // 100, n_episodes - 1))


def split_train_val(dataset: TrajectoryDataset, val_max: int = 200,
                    seed: int = 0) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Episode-level split; both halves carry statistics computed on train only."""
    n = len(dataset.episodes)
    if n < 2:
        raise SplitError(f"{dataset.name}: need at least 2 episodes to split, got {n}")
    k = val_count(n, val_max)
    perm = RngState(seed).child(f"split:{dataset.name}").permutation(n)
    val_idx = sorted(int(i) for i in perm[:k])
    train_idx = sorted(int(i) for i in perm[k:])
    train = dataset.subset(train_idx, f"{dataset.name}")
    val = dataset.subset(val_idx, f"{dataset.name}")
    stats = compute_stats(train)
    return replace(train, stats=stats), replace(val, stats=stats)


def limit_episodes(dataset: TrajectoryDataset, max_traj: int | None) -> TrajectoryDataset:
    """First ``max_traj`` episodes with statistics recomputed on them."""
    if max_traj is None or max_traj >= len(dataset.episodes):
        return dataset
    sub = dataset.subset(range(max_traj))
    return replace(sub, stats=compute_stats(sub))

"""Trajectory datasets: in-memory types, normalisation statistics, on-disk format.

A dataset directory holds ``manifest.json`` and one ``ep_NNNNNN.bin`` per
episode. Episode files are::

    b"HPTE" | u32 version | u32 T | u32 d_p | u32 d_a | u32 Hf | u32 Wf | u32 Cf
    | f32 proprio[T, d_p] | f32 vision[T, Hf, Wf, Cf] | f32 actions[T, d_a]

little-endian, row-major, no padding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import (BadMagicError, FormatError, HptError, ShapeMismatchError, TruncatedFileError,
                      VersionMismatchError)
from ..model import EmbodimentSpec

EP_MAGIC = b"HPTE"
FORMAT_VERSION = 1
STD_FLOOR = 1e-6
_EP_HEADER = struct.Struct("<4s7I")


class EmptyDatasetError(HptError, ValueError):
    pass


@dataclass
class Episode:
    proprio: np.ndarray   # [T, d_p], f32 (d_p may be 0)
    vision: np.ndarray    # [T, Hf, Wf, Cf], f32
    actions: np.ndarray   # [T, d_a], f32

    def __post_init__(self):
        t = len(self.actions)
        if t < 1:
            raise ValueError("episode must have at least one step")
        if len(self.proprio) != t or len(self.vision) != t:
            raise ValueError(f"episode arrays disagree on length: proprio {self.proprio.shape}, "
                             f"vision {self.vision.shape}, actions {self.actions.shape}")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class NormStats:
    action_min: np.ndarray
    action_max: np.ndarray
    proprio_mean: np.ndarray
    proprio_std: np.ndarray

    def to_dict(self) -> dict[str, list[float]]:
        return {k: [float(x) for x in getattr(self, k)] for k in
                ("action_min", "action_max", "proprio_mean", "proprio_std")}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, NormStats):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in
                   ("action_min", "action_max", "proprio_mean", "proprio_std"))


@dataclass
class TrajectoryDataset:
    name: str
    spec: EmbodimentSpec
    episodes: list[Episode]
    stats: NormStats | None = None
    path: Path | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_steps(self) -> int:
        return sum(ep.length for ep in self.episodes)

    def subset(self, indices, name: str | None = None) -> "TrajectoryDataset":
        return replace(self, name=name or self.name, episodes=[self.episodes[i] for i in indices],
                       path=None, meta=dict(self.meta))

    def check(self) -> None:
        """Raise ShapeMismatchError if any episode disagrees with the embodiment spec."""
        s = self.spec
        for i, ep in enumerate(self.episodes):
            want = [(s.proprio_dim,), s.vision_grid, (s.action_dim,)]
            got = [ep.proprio.shape[1:], ep.vision.shape[1:], ep.actions.shape[1:]]
            if [tuple(g) for g in got] != [tuple(w) for w in want]:
                raise ShapeMismatchError(f"{self.name}: episode {i} shapes {got} != spec {want}")


# -- statistics -----------------------------------------------------------

def compute_stats(dataset: TrajectoryDataset) -> NormStats:
    if not dataset.episodes:
        raise EmptyDatasetError(f"{dataset.name}: cannot compute statistics of an empty dataset")
    acts = np.concatenate([ep.actions for ep in dataset.episodes]).astype(np.float64)
    prop = np.concatenate([ep.proprio for ep in dataset.episodes]).astype(np.float64)
    return NormStats(
        action_min=acts.min(axis=0),
        action_max=acts.max(axis=0),
        proprio_mean=prop.mean(axis=0) if prop.shape[1] else np.zeros(0),
        proprio_std=np.maximum(prop.std(axis=0), STD_FLOOR) if prop.shape[1] else np.zeros(0),
    )


def normalize_action(a, stats: NormStats) -> np.ndarray:
    """Map to [-1, 1] per dimension; degenerate dimensions (max == min) map to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = stats.action_min, stats.action_max
    span = hi - lo
    ok = span > 0
    out = np.where(ok, 2.0 * (a - lo) / np.where(ok, span, 1.0) - 1.0, 0.0)
    return out


def unnormalize_action(a_hat, stats: NormStats) -> np.ndarray:
    a_hat = np.asarray(a_hat, dtype=np.float64)
    lo, hi = stats.action_min, stats.action_max
    span = hi - lo
    return np.where(span > 0, (a_hat + 1.0) * 0.5 * span + lo, lo)


def normalize_proprio(p, stats: NormStats) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - stats.proprio_mean) / stats.proprio_std


# -- on-disk format -------------------------------------------------------

def _episode_bytes(ep: Episode) -> bytes:
    t = ep.length
    d_p = ep.proprio.shape[1]
    d_a = ep.actions.shape[1]
    hf, wf, cf = ep.vision.shape[1:]
    head = _EP_HEADER.pack(EP_MAGIC, FORMAT_VERSION, t, d_p, d_a, hf, wf, cf)
    body = b"".join(np.ascontiguousarray(x, dtype="<f4").tobytes()
                    for x in (ep.proprio, ep.vision, ep.actions))
    return head + body


def _manifest(ds: TrajectoryDataset) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "name": ds.name,
        "embodiment": ds.spec.to_dict(),
        "episode_count": len(ds.episodes),
        "stats": None if ds.stats is None else ds.stats.to_dict(),
        "meta": ds.meta,
    }


def write_dataset(dataset: TrajectoryDataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dataset.check()
    for old in d.glob("ep_*.bin"):
        old.unlink()
    for i, ep in enumerate(dataset.episodes):
        (d / f"ep_{i:06d}.bin").write_bytes(_episode_bytes(ep))
    text = json.dumps(_manifest(dataset), indent=2, sort_keys=True) + "\n"
    (d / "manifest.json").write_text(text, encoding="utf-8")
    return d


def read_episode(path: Path, spec: EmbodimentSpec) -> Episode:
    buf = Path(path).read_bytes()
    if len(buf) < 4 and EP_MAGIC.startswith(buf):
        raise TruncatedFileError(f"{path}: file ends inside the magic number")
    if buf[:4] != EP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {EP_MAGIC!r}")
    if len(buf) < _EP_HEADER.size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    _, version, t, d_p, d_a, hf, wf, cf = _EP_HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: episode version {version}, supported {FORMAT_VERSION}")
    if (d_p, d_a, (hf, wf, cf)) != (spec.proprio_dim, spec.action_dim, spec.vision_grid) or t < 1:
        raise ShapeMismatchError(f"{path.name}: header (T={t}, d_p={d_p}, d_a={d_a}, grid={(hf, wf, cf)}) "
                                 f"disagrees with manifest embodiment {spec.to_dict()}")
    sizes = [t * d_p, t * hf * wf * cf, t * d_a]
    need = _EP_HEADER.size + 4 * sum(sizes)
    if len(buf) < need:
        raise TruncatedFileError(f"{path.name}: {len(buf)} bytes, header implies {need}")
    if len(buf) > need:
        raise ShapeMismatchError(f"{path.name}: {len(buf) - need} bytes beyond the declared arrays")
    off = _EP_HEADER.size
    arrays = []
    for n, shape in zip(sizes, [(t, d_p), (t, hf, wf, cf), (t, d_a)]):
        arrays.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape))
        off += 4 * n
    return Episode(*arrays)


def load_dataset(directory) -> TrajectoryDataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{mpath}: format version {manifest.get('format_version')}, "
                                   f"supported {FORMAT_VERSION}")
    spec = EmbodimentSpec.from_dict(manifest["embodiment"])
    n = manifest["episode_count"]
    episodes = [read_episode(d / f"ep_{i:06d}.bin", spec) for i in range(n)]
    extra = sorted(p.name for p in d.glob("ep_*.bin"))[n:]
    if extra:
        raise ShapeMismatchError(f"{d}: {len(extra)} episode files beyond manifest count {n}")
    stats = None if manifest.get("stats") is None else NormStats.from_dict(manifest["stats"])
    return TrajectoryDataset(manifest["name"], spec, episodes, stats, d, manifest.get("meta", {}))

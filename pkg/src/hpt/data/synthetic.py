"""PointReach: a point-mass goal-reaching task used as a stand-in embodiment family.

State ``p`` and goal ``g`` live in the unit box of R^n. Each embodiment sees
actions through its own transform (axis permutation then per-axis gain),
proprioception ``[p; g]`` and a (Hf, Wf, 2) feature grid with Gaussian
blobs (sigma = one cell) over the first two coordinates of ``p`` and ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..model import EmbodimentSpec
from ..rng import RngState, derive_seed
from .dataset import Episode, TrajectoryDataset, compute_stats


@dataclass(frozen=True)
class SyntheticTemplate:
    name: str
    n: int = 2
    permutation: tuple[int, ...] = (0, 1)
    gains: tuple[float, ...] = (1.0, 1.0)
    grid: tuple[int, int] = (4, 4)
    max_step: float = 0.2
    gain: float = 1.0
    max_steps: int = 50
    success_radius: float = 0.05

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ConfigError(f"PointReach supports n in {{2, 3}}, got {self.n}", "n")
        if sorted(self.permutation) != list(range(self.n)) or len(self.gains) != self.n:
            raise ConfigError(f"template {self.name!r}: permutation/gains must cover {self.n} axes")
        if any(g == 0 for g in self.gains):
            raise ConfigError(f"template {self.name!r}: gains must be nonzero")

    def spec(self) -> EmbodimentSpec:
        return EmbodimentSpec(self.name, 2 * self.n, self.n, (self.grid[0], self.grid[1], 2))


TEMPLATES: dict[str, SyntheticTemplate] = {t.name: t for t in [
    SyntheticTemplate("reach2d", 2, (0, 1), (1.0, 1.0), (4, 4)),
    SyntheticTemplate("reach2d_swap", 2, (1, 0), (1.5, -1.0), (5, 5)),
    SyntheticTemplate("reach3d", 3, (0, 1, 2), (1.0, 1.0, 1.0), (4, 4)),
    SyntheticTemplate("reach3d_rot", 3, (2, 0, 1), (0.5, 2.0, -1.0), (6, 6)),
    SyntheticTemplate("reach2d_new", 2, (1, 0), (-1.0, 0.75), (4, 4)),
]}


def get_template(name: str) -> SyntheticTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise ConfigError(f"unknown template {name!r}; known: {sorted(TEMPLATES)}", "templates") from None


def render_grid(p: np.ndarray, g: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    hf, wf = grid
    rows = (np.arange(hf) + 0.5) / hf
    cols = (np.arange(wf) + 0.5) / wf
    out = np.empty((hf, wf, 2), dtype=np.float64)
    for c, pt in enumerate((p, g)):
        dr = (rows[:, None] - pt[0]) * hf
        dc = (cols[None, :] - pt[1]) * wf
        out[:, :, c] = np.exp(-0.5 * (dr * dr + dc * dc))
    return out


@dataclass
class ToyEnv:
    template: SyntheticTemplate
    p: np.ndarray = field(default=None)
    g: np.ndarray = field(default=None)
    steps: int = 0

    @property
    def spec(self) -> EmbodimentSpec:
        return self.template.spec()

    def reset(self, rng: RngState) -> None:
        t = self.template
        while True:
            p = rng.uniform(t.n)
            g = rng.uniform(t.n)
            if np.linalg.norm(p - g) >= t.success_radius:
                break
        self.p, self.g, self.steps = p, g, 0

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        proprio = np.concatenate([self.p, self.g]).astype(np.float32)
        return proprio, render_grid(self.p, self.g, self.template.grid).astype(np.float32)

    def to_action(self, displacement: np.ndarray) -> np.ndarray:
        t = self.template
        return np.asarray(t.gains) * np.asarray(displacement)[list(t.permutation)]

    def from_action(self, action: np.ndarray) -> np.ndarray:
        t = self.template
        d = np.empty(t.n)
        d[list(t.permutation)] = np.asarray(action, dtype=np.float64) / np.asarray(t.gains)
        return d

    def _clip(self, d: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(d)
        limit = self.template.max_step
        return d if norm <= limit else d * (limit / norm)

    def expert_action(self) -> np.ndarray:
        return self.to_action(self._clip(self.template.gain * (self.g - self.p)))

    def step(self, action) -> bool:
        """Apply an action in embodiment units; returns True on success."""
        self.p = self.p + self._clip(self.from_action(action))
        self.steps += 1
        return self.success

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.p - self.g))

    @property
    def success(self) -> bool:
        return self.distance < self.template.success_radius


def expert_episode(env: ToyEnv, rng: RngState) -> Episode:
    env.reset(rng)
    props, visions, acts = [], [], []
    while True:
        p, v = env.observe()
        a = env.expert_action()
        props.append(p)
        visions.append(v)
        acts.append(a.astype(np.float32))
        if env.step(a) or env.steps >= env.template.max_steps:
            break
    return Episode(np.stack(props), np.stack(visions), np.stack(acts))


def gen_synthetic_embodiment(template: SyntheticTemplate | str, n_traj: int, seed: int,
                             name: str | None = None) -> TrajectoryDataset:
    """Expert PointReach rollouts. Start/goal geometry depends on ``(seed, n)`` only."""
    if isinstance(template, str):
        template = get_template(template)
    if n_traj < 1:
        raise ConfigError(f"n_traj must be >= 1, got {n_traj}", "n_traj")
    rng = RngState(derive_seed(seed, f"pointreach-geometry-n{template.n}"))
    env = ToyEnv(template)
    episodes = [expert_episode(env, rng) for _ in range(n_traj)]
    ds = TrajectoryDataset(name or template.name, template.spec(), episodes,
                           meta={"template": template.name, "seed": int(seed)})
    ds.stats = compute_stats(ds)
    return ds

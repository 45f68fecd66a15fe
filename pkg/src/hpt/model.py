"""Stems, shared trunk, heads, and the embodiment-routed policy model."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, RegistryError, RoutingError
from .nn import (EVAL, AttentionParams, ForwardMode, LayerNormParams, MlpParams, ParamRegistry,
                 TransformerBlockParams, cross_attend, init_params, param_count, transformer_block)
from .rng import RngState
from .tensor import Tensor

# (depth, width, heads)
MODEL_SIZES: dict[str, tuple[int, int, int]] = {
    "S": (16, 128, 8),
    "B": (16, 256, 8),
    "L": (16, 512, 8),
    "XL": (32, 768, 16),
    "Huge": (80, 1024, 16),
    "S-mini": (4, 64, 4),
    "mini": (2, 16, 2),
}

VISION, PROPRIO, LANGUAGE = 0, 1, 2


@dataclass(frozen=True)
class EmbodimentSpec:
    id: str
    proprio_dim: int
    action_dim: int
    vision_grid: tuple[int, int, int]
    obs_horizon: int = 4
    action_horizon: int = 8

    def __post_init__(self):
        object.__setattr__(self, "vision_grid", tuple(int(v) for v in self.vision_grid))
        if self.proprio_dim < 0:
            raise ConfigError(f"proprio_dim must be >= 0, got {self.proprio_dim}", "proprio_dim")
        if self.action_dim < 1:
            raise ConfigError(f"action_dim must be >= 1, got {self.action_dim}", "action_dim")
        if len(self.vision_grid) != 3 or min(self.vision_grid) < 1:
            raise ConfigError(f"vision_grid must be (Hf, Wf, Cf) >= 1, got {self.vision_grid}", "vision_grid")
        if self.obs_horizon < 1 or self.action_horizon < 1:
            raise ConfigError("horizons must be >= 1", "obs_horizon")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["vision_grid"] = list(self.vision_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EmbodimentSpec":
        return cls(**{**d, "vision_grid": tuple(d["vision_grid"])})


@dataclass
class ModelConfig:
    width: int = 128
    depth: int = 16
    heads: int = 8
    mlp_ratio: int = 4
    cross_heads: int = 8
    cross_head_dim: int = 64
    n_vision_tokens: int = 16
    n_proprio_tokens: int = 16
    n_modalities: int = 2
    stem_hidden: int = 128
    stem_mlp_layers: int = 2
    head_hidden: int = 256
    dropout: float = 0.1
    causal: bool = False
    use_trunk: bool = True
    dtype: str = "float32"

    @classmethod
    def from_size(cls, size: str, **overrides) -> "ModelConfig":
        if size not in MODEL_SIZES:
            raise ConfigError(f"unknown model size {size!r}; known: {sorted(MODEL_SIZES)}", "model.size")
        depth, width, heads = MODEL_SIZES[size]
        return cls(**{"width": width, "depth": depth, "heads": heads, **overrides})

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(**d)


# -- stem -----------------------------------------------------------------

@dataclass
class StemParams:
    spec: EmbodimentSpec
    width: int
    mlp_layers: int
    proprio_mlp: MlpParams | None
    proprio_tokens: Tensor | None
    proprio_attn: AttentionParams | None
    vision_proj: MlpParams
    vision_tokens: Tensor
    vision_attn: AttentionParams

    @classmethod
    def create(cls, reg: ParamRegistry, spec: EmbodimentSpec, cfg: ModelConfig,
               rng: RngState | None, mlp_layers: int | None = None) -> "StemParams":
        d, dt = cfg.width, cfg.np_dtype
        layers = cfg.stem_mlp_layers if mlp_layers is None else mlp_layers
        if layers not in (1, 2):
            raise ConfigError(f"stem MLP must have 1 or 2 layers, got {layers}", "stem_mlp_layers")
        pre = f"stem.{spec.id}"
        sub = (lambda s: rng.child(s)) if rng is not None else (lambda s: None)
        p_mlp = p_tok = p_attn = None
        if spec.proprio_dim > 0:
            dims = [spec.proprio_dim, d] if layers == 1 else [spec.proprio_dim, cfg.stem_hidden, d]
            p_mlp = MlpParams.create(reg, f"{pre}.proprio.mlp", dims, sub("proprio.mlp"), dt)
            p_tok = reg.add(f"{pre}.proprio.tokens",
                            init_params((cfg.n_proprio_tokens, d), "normal", sub("proprio.tokens"), dt))
            p_attn = AttentionParams.create(reg, f"{pre}.proprio.attn", d, cfg.cross_heads,
                                            cfg.cross_head_dim, sub("proprio.attn"), dt)
        cf = spec.vision_grid[2]
        v_proj = MlpParams.create(reg, f"{pre}.vision.proj", [cf, d], sub("vision.proj"), dt)
        v_tok = reg.add(f"{pre}.vision.tokens",
                        init_params((cfg.n_vision_tokens, d), "normal", sub("vision.tokens"), dt))
        v_attn = AttentionParams.create(reg, f"{pre}.vision.attn", d, cfg.cross_heads,
                                        cfg.cross_head_dim, sub("vision.attn"), dt)
        return cls(spec, d, layers, p_mlp, p_tok, p_attn, v_proj, v_tok, v_attn)


def tokenize_proprio(proprio: Tensor, stem: StemParams, mode: ForwardMode = EVAL) -> Tensor:
    """[T_obs, d_p] or [B, T_obs, d_p] -> [16, d] or [B, 16, d]."""
    spec = stem.spec
    if stem.proprio_mlp is None:
        raise RoutingError(f"embodiment {spec.id!r} has no proprioception")
    if proprio.shape[-1] != spec.proprio_dim:
        raise RoutingError(f"proprio dim {proprio.shape[-1]} does not match embodiment "
                           f"{spec.id!r} (d_p={spec.proprio_dim})")
    t_obs = proprio.shape[-2]
    if not 1 <= t_obs <= spec.obs_horizon:
        raise DimensionError(f"observation length {t_obs} outside [1, {spec.obs_horizon}]")
    feats = stem.proprio_mlp(proprio)
    pe = T.sinusoidal_pe(t_obs, stem.width, dtype=feats.dtype)
    return cross_attend(stem.proprio_tokens, feats, stem.proprio_attn, key_pos=pe, mode=mode)


def tokenize_vision(features: Tensor, stem: StemParams, mode: ForwardMode = EVAL) -> Tensor:
    """[T_obs, Hf, Wf, Cf] or [B, T_obs, Hf, Wf, Cf] -> [16, d] or [B, 16, d]."""
    spec = stem.spec
    if tuple(features.shape[-3:]) != spec.vision_grid:
        raise RoutingError(f"vision grid {tuple(features.shape[-3:])} does not match embodiment "
                           f"{spec.id!r} {spec.vision_grid}")
    t_obs = features.shape[-4]
    if not 1 <= t_obs <= spec.obs_horizon:
        raise DimensionError(f"observation length {t_obs} outside [1, {spec.obs_horizon}]")
    lead = features.shape[:-4]
    hf, wf, cf = spec.vision_grid
    cells = features.reshape(lead + (t_obs * hf * wf, cf))
    feats = stem.vision_proj(cells)
    pe = T.sinusoidal_pe(t_obs * hf * wf, stem.width, dtype=feats.dtype)
    return cross_attend(stem.vision_tokens, feats, stem.vision_attn, key_pos=pe, mode=mode)


# -- trunk ----------------------------------------------------------------

@dataclass
class TrunkParams:
    modality_emb: Tensor
    blocks: list[TransformerBlockParams]
    final_ln: LayerNormParams
    causal: bool = False

    @classmethod
    def create(cls, reg: ParamRegistry, cfg: ModelConfig, rng: RngState | None) -> "TrunkParams":
        dt = cfg.np_dtype
        emb = reg.add("trunk.modality_emb", init_params(
            (cfg.n_modalities, cfg.width), "normal", rng.child("modality_emb") if rng else None, dt))
        blocks = [
            TransformerBlockParams.create(reg, f"trunk.block{i}", cfg.width, cfg.heads,
                                          rng.child(f"block{i}") if rng else None, dt, cfg.mlp_ratio)
            for i in range(cfg.depth)
        ]
        ln = LayerNormParams.create(reg, "trunk.final_ln", cfg.width, dt)
        return cls(emb, blocks, ln, cfg.causal)

    @property
    def width(self) -> int:
        return self.modality_emb.shape[1]


def trunk_param_count(cfg: ModelConfig) -> int:
    """Closed-form size of the trunk ``create`` would build, without allocating it."""
    d, hidden = cfg.width, cfg.width * cfg.mlp_ratio
    block = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 2 * 2 * d
    return cfg.n_modalities * d + cfg.depth * block + 2 * d


def assemble_tokens(vision_tokens: Tensor, proprio_tokens: Tensor | None, trunk: TrunkParams,
                    language_tokens: Tensor | None = None) -> Tensor:
    """Concatenate [vision | proprio | language] segments, add modality and slot embeddings."""
    segments = [(vision_tokens, VISION)]
    if proprio_tokens is not None:
        segments.append((proprio_tokens, PROPRIO))
    if language_tokens is not None:
        if trunk.modality_emb.shape[0] <= LANGUAGE:
            raise ConfigError("trunk has no language modality embedding", "n_modalities")
        segments.append((language_tokens, LANGUAGE))
    parts = []
    for tok, idx in segments:
        if tok.shape[-1] != trunk.width:
            raise DimensionError(f"token width {tok.shape[-1]} != trunk width {trunk.width}")
        parts.append(T.add(tok, T.getitem(trunk.modality_emb, idx)))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-2)
    return T.add(x, T.sinusoidal_pe(x.shape[-2], trunk.width, dtype=x.dtype))


def trunk_forward(tokens: Tensor, trunk: TrunkParams, mode: ForwardMode = EVAL) -> Tensor:
    """Blocks, final LayerNorm, mean over tokens: [.., S, d] -> [.., d]."""
    if tokens.shape[-1] != trunk.width:
        raise DimensionError(f"trunk input width {tokens.shape[-1]} != {trunk.width}")
    x = tokens
    for block in trunk.blocks:
        x = transformer_block(x, block, mode, causal=trunk.causal)
    return T.mean(trunk.final_ln(x), axis=-2)


# -- head -----------------------------------------------------------------

@dataclass
class HeadParams:
    spec: EmbodimentSpec
    mlp: MlpParams

    @classmethod
    def create(cls, reg: ParamRegistry, spec: EmbodimentSpec, cfg: ModelConfig,
               rng: RngState | None) -> "HeadParams":
        out = spec.action_horizon * spec.action_dim
        dims = [cfg.width, cfg.head_hidden, cfg.head_hidden, out]
        return cls(spec, MlpParams.create(reg, f"head.{spec.id}", dims, rng, cfg.np_dtype))

    def __call__(self, pooled: Tensor) -> Tensor:
        y = self.mlp(pooled)
        return y.reshape(pooled.shape[:-1] + (self.spec.action_horizon, self.spec.action_dim))


# -- model ----------------------------------------------------------------

class HptModel:
    """One shared trunk plus per-embodiment stem/head pairs in a single registry."""

    def __init__(self, config: ModelConfig, rng: RngState | None = None):
        self.config = config
        self.registry = ParamRegistry()
        self.trunk = TrunkParams.create(self.registry, config, rng.child("trunk") if rng else None) \
            if config.use_trunk else None
        self.stems: dict[str, StemParams] = {}
        self.heads: dict[str, HeadParams] = {}
        self.specs: dict[str, EmbodimentSpec] = {}
        self.stats: dict[str, Any] = {}

    @classmethod
    def skeleton(cls, config: ModelConfig) -> "HptModel":
        """Zero-filled model with the right tensor layout (checkpoint loading)."""
        return cls(config, rng=None)

    @property
    def width(self) -> int:
        return self.config.width

    @property
    def dtype(self):
        return self.config.np_dtype

    def register_embodiment(self, spec: EmbodimentSpec, rng: RngState | None,
                            replace: bool = False, stem_mlp_layers: int | None = None) -> None:
        if spec.id in self.specs:
            if not replace:
                raise RegistryError(f"embodiment {spec.id!r} already registered")
            self.unregister(spec.id)
        self.stems[spec.id] = StemParams.create(self.registry, spec, self.config,
                                                rng.child(f"stem.{spec.id}") if rng else None, stem_mlp_layers)
        self.heads[spec.id] = HeadParams.create(self.registry, spec, self.config,
                                                rng.child(f"head.{spec.id}") if rng else None)
        self.specs[spec.id] = spec

    def unregister(self, embodiment_id: str) -> None:
        self.registry.remove(f"stem.{embodiment_id}")
        self.registry.remove(f"head.{embodiment_id}")
        for table in (self.stems, self.heads, self.specs, self.stats):
            table.pop(embodiment_id, None)

    def spec(self, embodiment_id: str) -> EmbodimentSpec:
        try:
            return self.specs[embodiment_id]
        except KeyError:
            raise RegistryError(f"unknown embodiment {embodiment_id!r}; registered: {sorted(self.specs)}") from None

    def param_names(self, embodiment_id: str) -> list[str]:
        """Names touched by a forward pass for ``embodiment_id``."""
        self.spec(embodiment_id)
        return (self.registry.names("trunk") + self.registry.names(f"stem.{embodiment_id}")
                + self.registry.names(f"head.{embodiment_id}"))

    def count(self, prefix: str = "") -> int:
        return param_count(self.registry, prefix)

    def tokens(self, embodiment_id: str, proprio, vision, mode: ForwardMode = EVAL) -> Tensor:
        """Stem tokens ready for the trunk (or for pooling in no-trunk mode)."""
        spec = self.spec(embodiment_id)
        stem = self.stems[embodiment_id]
        vis = tokenize_vision(self._as_input(vision), stem, mode)
        prop = None
        if spec.proprio_dim > 0:
            if proprio is None:
                raise RoutingError(f"embodiment {embodiment_id!r} expects proprioception")
            prop = tokenize_proprio(self._as_input(proprio), stem, mode)
        if self.trunk is None:
            return vis if prop is None else T.concat([vis, prop], axis=-2)
        return assemble_tokens(vis, prop, self.trunk)

    def forward(self, embodiment_id: str, proprio, vision, mode: ForwardMode = EVAL) -> Tensor:
        """Normalised action trajectory [.., action_horizon, d_a]."""
        tokens = self.tokens(embodiment_id, proprio, vision, mode)
        if self.trunk is None:
            pooled = T.mean(tokens, axis=-2)
        else:
            pooled = trunk_forward(tokens, self.trunk, mode)
        return self.heads[embodiment_id](pooled)

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == self.dtype else Tensor(x.data.astype(self.dtype))
        return Tensor(np.asarray(x, dtype=self.dtype))

    def frozen_prefixes(self) -> list[str]:
        top = {}
        for name in self.registry:
            key = name.split(".")[0] if name.startswith("trunk") else ".".join(name.split(".")[:2])
            top.setdefault(key, []).append(self.registry.is_trainable(name))
        return [k for k, flags in top.items() if not any(flags)]


def register_embodiment(spec: EmbodimentSpec, model: HptModel, rng: RngState,
                        replace: bool = False) -> None:
    model.register_embodiment(spec, rng, replace=replace)


def policy_forward(obs: dict, embodiment_id: str, model: HptModel, mode: ForwardMode = EVAL) -> Tensor:
    """``obs = {"proprio": [T, d_p] | None, "vision": [T, Hf, Wf, Cf]}`` -> [H, d_a]."""
    return model.forward(embodiment_id, obs.get("proprio"), obs["vision"], mode)

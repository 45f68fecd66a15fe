"""Command-line entry point: ``hpt <command> [--config FILE] [--out DIR] [--set key=value ...]``.

Configuration is a JSON object with the sections below; any value can be
overridden with a dotted ``--set`` flag (values are parsed as JSON when
possible, otherwise taken as strings). The fully resolved configuration is
written to ``<output>/resolved_config.json`` by every command, and running
the same command with ``--config`` pointing at that file repeats the run.

Exit codes: 0 success, 1 configuration error, 2 I/O or format error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .data.dataset import EmptyDatasetError, load_dataset, write_dataset
from .data.sampling import SplitError, limit_episodes, split_train_val
from .data.synthetic import TEMPLATES, ToyEnv, gen_synthetic_embodiment, get_template
from .errors import ConfigError, DimensionError, FormatError, HptError, RoutingError, TrainingError
from .model import HptModel, ModelConfig
from .train.evaluate import ExpertPolicy, HptPolicy, eval_validation_loss, rollout
from .train.experiments import build_model, compare_baselines, run_scaling_experiment
from .train.loop import TrainConfig, TransferConfig, pretrain, transfer

log = logging.getLogger("hpt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("gen", "pretrain", "transfer", "eval", "rollout", "scale", "inspect")

DEFAULTS: dict = {
    "model": {"size": "S-mini", "width": None, "depth": None, "heads": None, "dropout": 0.1},
    "train": {"lr": 2e-4, "batch": 32, "steps": 1000, "warmup": None, "seed": 0, "workers": 4,
              "min_lr_frac": 0.1, "weight_decay": 0.05, "eval_interval": 0, "max_grad_norm": None},
    "data": {"roots": [], "max_traj": None, "val_max": 200},
    "transfer": {"mode": "frozen", "freeze": None, "lr": 1e-5, "steps": 2000, "batch": 32,
                 "checkpoint": None, "stem_mlp_layers": 1},
    "gen": {"templates": sorted(TEMPLATES), "n_traj": 100},
    "eval": {"checkpoint": None},
    "rollout": {"mode": "policy", "checkpoint": None, "embodiment": None, "template": None,
                "episodes": 50, "history": 2, "seed": 0},
    "scale": {"grid": {"max_traj": [10, 100, 1000]}},
    "output": "runs/latest",
}

_NUMBER = (int, float)
# Accepted types per key; None in the tuple allows null.
SCHEMA: dict = {
    "model": {"size": (str,), "width": (int, None), "depth": (int, None), "heads": (int, None),
              "dropout": _NUMBER},
    "train": {"lr": _NUMBER, "batch": (int,), "steps": (int,), "warmup": (int, None), "seed": (int,),
              "workers": (int,), "min_lr_frac": _NUMBER, "weight_decay": _NUMBER, "eval_interval": (int,),
              "max_grad_norm": (int, float, None)},
    "data": {"roots": (list,), "max_traj": (int, None), "val_max": (int,)},
    "transfer": {"mode": (str,), "freeze": (bool, None), "lr": _NUMBER, "steps": (int,), "batch": (int,),
                 "checkpoint": (str, None), "stem_mlp_layers": (int,)},
    "gen": {"templates": (list,), "n_traj": (int,)},
    "eval": {"checkpoint": (str, None)},
    "rollout": {"mode": (str,), "checkpoint": (str, None), "embodiment": (str, None),
                "template": (str, None), "episodes": (int,), "history": (int,), "seed": (int,)},
    "scale": {"grid": (dict,)},
}


# -- configuration --------------------------------------------------------

def _merge(base: dict, extra: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        key = f"{path}{k}"
        if isinstance(out.get(k), dict) and k in SCHEMA and not isinstance(v, dict):
            raise ConfigError("expected an object", key)
        if isinstance(out.get(k), dict) and isinstance(v, dict) and k in SCHEMA:
            out[k] = _merge(out[k], v, f"{key}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value", "--set")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError("cannot set a field below a non-object value", ".".join(parts[:i + 1]))
        node = nxt
    node[parts[-1]] = _parse_value(raw)


def _type_ok(value, allowed) -> bool:
    for t in allowed:
        if t is None and value is None:
            return True
        if t is int and isinstance(value, bool):
            continue
        if t is not None and isinstance(value, t):
            return True
    return False


def validate_config(cfg: dict) -> None:
    for section, fields in SCHEMA.items():
        block = cfg.get(section)
        if not isinstance(block, dict):
            raise ConfigError("expected an object", section)
        for key, value in block.items():
            path = f"{section}.{key}"
            if key not in fields:
                raise ConfigError(f"unknown key (allowed: {sorted(fields)})", path)
            if not _type_ok(value, fields[key]):
                raise ConfigError(f"invalid value {value!r}", path)
    if not isinstance(cfg.get("output"), str) or not cfg["output"]:
        raise ConfigError("output must be a non-empty path string", "output")
    if not all(isinstance(r, str) for r in cfg["data"]["roots"]):
        raise ConfigError("every root must be a path string", "data.roots")
    for key in ("batch", "steps", "workers"):
        if cfg["train"][key] < 1:
            raise ConfigError("must be >= 1", f"train.{key}")
    if cfg["train"]["lr"] <= 0:
        raise ConfigError("must be positive", "train.lr")


def resolve_config(config_path: str | None, overrides: list[str], out: str | None = None,
                   seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file ({e.strerror})", "--config") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON ({e})", "--config") from None
        if not isinstance(loaded, dict):
            raise ConfigError("top level must be a JSON object", "--config")
        loaded.pop("command", None)
        cfg = _merge(cfg, loaded)
    for item in overrides:
        apply_override(cfg, item)
    if out is not None:
        cfg["output"] = out
    if seed is not None:
        cfg["train"]["seed"] = seed
    validate_config(cfg)
    return cfg


def write_resolved(cfg: dict, command: str) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.json"
    path.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    overrides = {k: m[k] for k in ("width", "depth", "heads") if m[k] is not None}
    return ModelConfig.from_size(m["size"], dropout=float(m["dropout"]), **overrides)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(base_lr=float(t["lr"]), batch_size=t["batch"], total_steps=t["steps"],
                       warmup_steps=t["warmup"], min_lr_frac=float(t["min_lr_frac"]), workers=t["workers"],
                       seed=t["seed"], model_size=cfg["model"]["size"],
                       weight_decay=float(t["weight_decay"]), eval_interval=t["eval_interval"],
                       max_grad_norm=t["max_grad_norm"])


def transfer_config(cfg: dict) -> TransferConfig:
    t = cfg["transfer"]
    return TransferConfig(mode=t["mode"], freeze=t["freeze"], lr=float(t["lr"]), steps=t["steps"],
                          batch_size=t["batch"], stem_mlp_layers=t["stem_mlp_layers"],
                          seed=cfg["train"]["seed"], dropout=float(cfg["model"]["dropout"]),
                          eval_interval=cfg["train"]["eval_interval"])


def load_roots(cfg: dict, expect: int | None = None):
    roots = cfg["data"]["roots"]
    if not roots:
        raise ConfigError("no dataset roots given", "data.roots")
    if expect is not None and len(roots) != expect:
        raise ConfigError(f"expected exactly {expect} root(s), got {len(roots)}", "data.roots")
    for r in roots:
        if not (Path(r) / "manifest.json").is_file():
            raise ConfigError(f"{r} is not a dataset directory (no manifest.json)", "data.roots")
    return [load_dataset(r) for r in roots]


def splits_for(cfg: dict, datasets):
    d = cfg["data"]
    seed = cfg["train"]["seed"]
    return [(limit_episodes(tr, d["max_traj"]), va)
            for tr, va in (split_train_val(ds, d["val_max"], seed) for ds in datasets)]


def _require(value, key: str):
    if value is None:
        raise ConfigError("required", key)
    return value


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands -------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    g = cfg["gen"]
    if g["n_traj"] < 1:
        raise ConfigError("must be >= 1", "gen.n_traj")
    for name in g["templates"]:
        if name not in TEMPLATES:
            raise ConfigError(f"unknown template {name!r}; known: {sorted(TEMPLATES)}", "gen.templates")
    out = Path(cfg["output"])
    print(f"{'dataset':<16}{'episodes':>10}{'steps':>8}{'d_p':>5}{'d_a':>5}  grid")
    for name in g["templates"]:
        ds = gen_synthetic_embodiment(name, g["n_traj"], cfg["train"]["seed"])
        write_dataset(ds, out / name)
        s = ds.spec
        print(f"{name:<16}{len(ds.episodes):>10}{ds.n_steps:>8}{s.proprio_dim:>5}{s.action_dim:>5}  "
              f"{'x'.join(map(str, s.vision_grid))}")
    return EXIT_OK


def cmd_pretrain(cfg: dict) -> int:
    splits = splits_for(cfg, load_roots(cfg))
    tcfg = train_config(cfg)
    mcfg = model_config(cfg)
    model = build_model(cfg["model"]["size"], [tr for tr, _ in splits], tcfg.seed,
                        **{k: v for k, v in mcfg.to_dict().items() if k in ("width", "depth", "heads", "dropout")})
    result = pretrain(tcfg, splits, model, cfg["output"])
    rep = result.final_report
    print(f"checkpoint: {result.checkpoint}")
    print(f"avg_val_loss: {rep.average!r}" if rep else "avg_val_loss: n/a")
    return EXIT_OK


def _base_for_transfer(cfg: dict, tcfg: TransferConfig) -> HptModel:
    path = cfg["transfer"]["checkpoint"]
    if path is None:
        if tcfg.mode in ("frozen", "finetuned"):
            raise ConfigError(f"mode {tcfg.mode!r} needs a pre-trained checkpoint", "transfer.checkpoint")
        return HptModel.skeleton(model_config(cfg))
    base = load_checkpoint(path)
    width = cfg["model"]["width"]
    if width is not None and width != base.config.width:
        raise ConfigError(f"config width {width} != checkpoint width {base.config.width}", "model.width")
    return base


def cmd_transfer(cfg: dict) -> int:
    (ds,) = load_roots(cfg, expect=1)
    tcfg = transfer_config(cfg)
    base = _base_for_transfer(cfg, tcfg)
    pair = split_train_val(ds, cfg["data"]["val_max"], cfg["train"]["seed"])
    pair = (limit_episodes(pair[0], cfg["data"]["max_traj"]), pair[1])
    result = transfer(tcfg, pair, base, cfg["output"])
    print(f"checkpoint: {result.checkpoint}")
    if result.final_report:
        print(f"avg_val_loss: {result.final_report.average!r}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    model = load_checkpoint(_require(cfg["eval"]["checkpoint"], "eval.checkpoint"))
    splits = splits_for(cfg, load_roots(cfg))
    for tr, _ in splits:
        if tr.spec.id not in model.specs:
            raise RoutingError(f"dataset embodiment {tr.spec.id!r} is not in the checkpoint")
    report = eval_validation_loss(model, [va for _, va in splits])
    _dump(Path(cfg["output"]) / "eval.json", report.to_dict(timing=False))
    print(json.dumps(report.to_dict(timing=False), sort_keys=True))
    return EXIT_OK


def cmd_rollout(cfg: dict) -> int:
    r = cfg["rollout"]
    out = Path(cfg["output"])
    if r["mode"] == "baselines":
        (ds,) = load_roots(cfg, expect=1)
        ckpt = _require(cfg["transfer"]["checkpoint"], "transfer.checkpoint")
        template = get_template(r["template"]) if r["template"] else None
        rows = compare_baselines(ds, ckpt, r["episodes"], transfer_config(cfg), out, r["seed"], template)
        print(f"{'mode':<11}{'success':>9}{'train_loss':>14}")
        for row in rows:
            print(f"{row['mode']:<11}{row['success_rate']:>9.2f}{row['final_train_loss']:>14.6f}")
        return EXIT_OK
    if r["mode"] == "expert":
        env = ToyEnv(get_template(_require(r["template"], "rollout.template")))
        policy = ExpertPolicy(env)
    elif r["mode"] == "policy":
        model = load_checkpoint(_require(r["checkpoint"], "rollout.checkpoint"))
        emb = r["embodiment"] or (next(iter(model.specs)) if len(model.specs) == 1 else None)
        emb = _require(emb, "rollout.embodiment")
        env = ToyEnv(get_template(r["template"] or emb))
        policy = HptPolicy(model, emb, r["history"])
    else:
        raise ConfigError(f"unknown mode {r['mode']!r}; use expert, policy or baselines", "rollout.mode")
    res = rollout(policy, env, r["episodes"], r["seed"])
    _dump(out / "rollout.json", res.to_dict())
    print(f"success_rate: {res.success_rate}")
    return EXIT_OK


def cmd_scale(cfg: dict) -> int:
    corpus = load_roots(cfg)
    mcfg = model_config(cfg)
    overrides = {k: v for k, v in mcfg.to_dict().items() if k in ("width", "depth", "heads", "dropout")
                 and (k == "dropout" or cfg["model"][k] is not None)}
    rows = run_scaling_experiment(cfg["scale"]["grid"], corpus, cfg["output"], train_config(cfg),
                                  cfg["data"]["val_max"], overrides)
    for row in rows:
        print(f"{row['run_id']} max_traj={row['max_traj']} avg_val_loss={row['avg_val_loss']} {row['status']}")
    return EXIT_OK


def cmd_inspect(cfg: dict, path: str | None) -> int:
    path = path or cfg["eval"]["checkpoint"]
    model = load_checkpoint(_require(path, "checkpoint"))
    c = model.config
    print(f"checkpoint: {path}")
    print(f"width: {c.width}  depth: {c.depth}  heads: {c.heads}  trunk: {'yes' if model.trunk else 'no'}")
    rows = []
    if model.trunk is not None:
        rows.append(("trunk", model.count("trunk")))
    for emb in model.specs:
        rows.append((f"stem.{emb}", model.count(f"stem.{emb}")))
        rows.append((f"head.{emb}", model.count(f"head.{emb}")))
    total = model.count()
    for name, n in rows:
        print(f"{name:<32}{n:>14,}")
    print(f"{'total':<32}{total:>14,}")
    print("embodiments:")
    for emb, s in model.specs.items():
        frozen = " (trunk frozen)" if "trunk" in model.frozen_prefixes() else ""
        print(f"  {emb}: proprio_dim={s.proprio_dim} action_dim={s.action_dim} "
              f"grid={'x'.join(map(str, s.vision_grid))}{frozen}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpt", description="Heterogeneous pre-trained transformer toolkit.")
    parser.add_argument("--version", action="version", version=f"hpt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (sets 'output')")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable")
        p.add_argument("--seed", type=int, help="sets train.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "gen":
            p.add_argument("--templates", nargs="+")
            p.add_argument("--n-traj", type=int)
        if name in ("eval", "rollout"):
            p.add_argument("--checkpoint")
        if name == "rollout":
            p.add_argument("--mode", choices=["expert", "policy", "baselines"])
            p.add_argument("--template")
        if name == "inspect":
            p.add_argument("checkpoint", nargs="?")
    return parser


def _flag_overrides(args) -> list[str]:
    extra = []
    cmd = args.command
    if cmd == "gen":
        if args.templates:
            extra.append(f"gen.templates={json.dumps(args.templates)}")
        if args.n_traj is not None:
            extra.append(f"gen.n_traj={args.n_traj}")
    if cmd in ("eval", "rollout") and args.checkpoint:
        extra.append(f"{cmd}.checkpoint={json.dumps(args.checkpoint)}")
    if cmd == "rollout":
        if args.mode:
            extra.append(f"rollout.mode={json.dumps(args.mode)}")
        if args.template:
            extra.append(f"rollout.template={json.dumps(args.template)}")
    return extra


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, list(args.overrides) + _flag_overrides(args), args.out, args.seed)
        write_resolved(cfg, args.command)
        if args.command == "inspect":
            return cmd_inspect(cfg, args.checkpoint)
        handler = {"gen": cmd_gen, "pretrain": cmd_pretrain, "transfer": cmd_transfer, "eval": cmd_eval,
                   "rollout": cmd_rollout, "scale": cmd_scale}[args.command]
        return handler(cfg)
    except TrainingError as e:
        snap = getattr(e, "snapshot_path", None)
        print(f"error: {e}" + (f" (snapshot: {snap})" if snap else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, EmptyDatasetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SplitError, RoutingError, DimensionError, HptError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def main(argv: list[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from hpt import tensor as T
from hpt.checkpoint import load_checkpoint, tensor_digest
from hpt.data import gen_synthetic_embodiment, get_template, make_batch, split_train_val, ToyEnv
from hpt.data.dataset import Episode, NormStats
from hpt.data.sampling import dataset_probs
from hpt.errors import NonFiniteLossError, RegistryError, RoutingError
from hpt.model import HptModel, ModelConfig
from hpt.nn import EVAL
from hpt.rng import RngState
from hpt.train import (ExpertPolicy, HptPolicy, TrainConfig, TransferConfig, batch_loss, dataset_loss,
                       eval_validation_loss, pretrain, rollout, transfer)
from hpt.train.experiments import (SCALING_COLUMNS, build_model, compare_baselines, expand_grid,
                                   run_scaling_experiment)

NAMES = ["reach2d", "reach3d"]


@pytest.fixture(scope="module")
def splits():
    return [split_train_val(gen_synthetic_embodiment(n, 20, 0)) for n in NAMES]


def small_cfg(**kw):
    base = dict(base_lr=1e-3, batch_size=8, reference_batch=8, total_steps=6, workers=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_pretrain_outputs(splits, tmp_path):
    m = build_model("mini", [t for t, _ in splits], 0)
    r = pretrain(small_cfg(eval_interval=3), splits, m, tmp_path)
    assert [x.step for x in r.reports] == [0, 3, 6]
    assert len(r.trace) == 6
    with open(tmp_path / "trace.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "lr", "train_loss"] and len(rows) == 7
    assert load_checkpoint(tmp_path / "checkpoint.hptc").stats.keys() == set(NAMES)


def test_unregistered_embodiment(splits):
    m = build_model("mini", [splits[0][0]], 0)
    with pytest.raises(RegistryError):
        pretrain(small_cfg(), splits, m)


def test_step_loss_is_sum_of_sub_batch_losses(splits):
    """Replays the first step's draws and recomputes each sub-batch loss in f64."""
    m = build_model("mini", [t for t, _ in splits], 0, dtype="float64", dropout=0.0)
    fresh = build_model("mini", [t for t, _ in splits], 0, dtype="float64", dropout=0.0)
    cfg = small_cfg(total_steps=1, workers=4)
    r = pretrain(cfg, splits, m)
    rng = RngState(cfg.seed)
    pick = rng.child("dataset-sampler")
    brngs = [rng.child(f"batches:{i}") for i in range(2)]
    probs = dataset_probs([t.n_steps for t, _ in splits])
    parts = []
    for _ in range(cfg.workers):
        k = pick.choice(probs)
        b = make_batch(splits[k][0], cfg.sub_batch, brngs[k], splits[k][0].stats)
        with T.no_grad():
            parts.append(float(batch_loss(fresh, b, EVAL).data))
    assert abs(r.trace[0].train_loss - math.fsum(parts)) < 1e-10


def test_lr_scales_linearly_with_batch():
    a, b = small_cfg(batch_size=16, reference_batch=256, total_steps=50), \
        small_cfg(batch_size=32, reference_batch=256, total_steps=50)
    assert all(b.lr_at(s) == 2 * a.lr_at(s) for s in range(51))


def test_routing_leaves_unsampled_stem_bitwise_unchanged(splits):
    m = build_model("mini", [t for t, _ in splits], 0)
    before = tensor_digest(m, "stem.reach3d") + tensor_digest(m, "head.reach3d")
    trunk_before = tensor_digest(m, "trunk")
    r = pretrain(small_cfg(), splits[:1], m)
    assert tensor_digest(m, "stem.reach3d") + tensor_digest(m, "head.reach3d") == before
    assert tensor_digest(m, "trunk") != trunk_before
    assert not any(n.startswith(("stem.reach3d", "head.reach3d")) for n in r.optimizer.m)


def test_single_dataset_g1_is_plain_bc(splits):
    train = splits[0][0]
    m = build_model("mini", [train], 0)
    before = dataset_loss(m, train)
    pretrain(small_cfg(workers=1, total_steps=40), splits[:1], m)
    assert small_cfg(workers=1).sub_batch == 8
    assert dataset_loss(m, train) < before


def test_nonfinite_loss_aborts_with_snapshot(splits, tmp_path):
    m = build_model("mini", [t for t, _ in splits], 0)
    m.registry["trunk.final_ln.beta"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as ei:
        pretrain(small_cfg(), splits, m, tmp_path)
    assert ei.value.step == 0 and ei.value.snapshot_path
    load_checkpoint(ei.value.snapshot_path)


def test_pretrain_deterministic(splits, tmp_path):
    runs = []
    for i in range(2):
        m = build_model("mini", [t for t, _ in splits], 0)
        runs.append(pretrain(small_cfg(), splits, m, tmp_path / str(i)))
    assert [t.train_loss for t in runs[0].trace] == [t.train_loss for t in runs[1].trace]
    assert (tmp_path / "0/checkpoint.hptc").read_bytes() == (tmp_path / "1/checkpoint.hptc").read_bytes()


# -- evaluation -----------------------------------------------------------

def test_eval_identical_datasets_and_stability(splits):
    m = build_model("mini", [splits[0][0]], 0)
    va = splits[0][1]
    one = eval_validation_loss(m, [va])
    two = eval_validation_loss(m, [va, va])
    assert two.average == one.average == list(one.per_dataset.values())[0]
    assert eval_validation_loss(m, [va]).average == one.average


def test_eval_zero_for_perfect_predictions(splits):
    """Constant actions normalise to 0; a zeroed output layer then predicts them exactly."""
    train = splits[0][0]
    ep = train.episodes[0]
    acts = np.repeat(ep.actions[:1], ep.length, axis=0)
    a0 = acts[0].astype(np.float64)
    stats = NormStats(a0 - 1.0, a0 + 1.0, train.stats.proprio_mean, train.stats.proprio_std)
    flat = replace(train.subset([0]), episodes=[Episode(ep.proprio, ep.vision, acts)], stats=stats)
    m = build_model("mini", [train], 0)
    out = m.heads[train.spec.id].mlp.layers[-1]
    out.w.data[:] = 0
    m.stats[train.spec.id] = stats
    assert eval_validation_loss(m, [flat]).average == 0.0


# -- transfer -------------------------------------------------------------

def test_transfer_frozen_keeps_trunk(splits, tmp_path):
    base = build_model("mini", [t for t, _ in splits], 0)
    pretrain(small_cfg(), splits, base, tmp_path / "pt")
    new = split_train_val(gen_synthetic_embodiment("reach2d_new", 20, 1))
    tc = TransferConfig(mode="frozen", steps=5, lr=1e-3, batch_size=8)
    r = transfer(tc, new, tmp_path / "pt/checkpoint.hptc")
    loaded = load_checkpoint(tmp_path / "pt/checkpoint.hptc")
    assert tensor_digest(r.model, "trunk") == tensor_digest(loaded, "trunk")
    assert list(r.model.specs) == ["reach2d_new"]
    assert r.model.stems["reach2d_new"].mlp_layers == 1
    r2 = transfer(TransferConfig(mode="finetuned", steps=5, lr=1e-3, batch_size=8), new, loaded)
    assert tensor_digest(r2.model, "trunk") != tensor_digest(loaded, "trunk")


def test_transfer_modes(splits):
    base = build_model("mini", [], 0)
    new = split_train_val(gen_synthetic_embodiment("reach2d_new", 20, 1))
    r = transfer(TransferConfig(mode="no_trunk", steps=2, batch_size=4), new, base)
    assert r.model.trunk is None
    assert r.model.count() == r.model.count("stem.reach2d_new") + r.model.count("head.reach2d_new")
    s = transfer(TransferConfig(mode="scratch", steps=2, batch_size=4), new, base)
    assert tensor_digest(s.model, "trunk") != tensor_digest(base, "trunk")
    assert s.model.registry.trainable_names("trunk")


# -- rollouts -------------------------------------------------------------

def test_expert_rollout_succeeds():
    env = ToyEnv(get_template("reach3d_rot"))
    res = rollout(ExpertPolicy(env), env, 50, seed=0)
    assert res.success_rate == 1.0 and res.episodes == 50
    assert all(0.0 < s <= 1.0 for s in res.partial_scores)


def test_random_policy_rarely_succeeds_and_is_deterministic(splits):
    m = build_model("mini", [splits[0][0]], 0)
    m.stats["reach2d"] = splits[0][0].stats
    env = ToyEnv(get_template("reach2d"))
    a = rollout(HptPolicy(m, "reach2d"), env, 50, seed=1)
    b = rollout(HptPolicy(m, "reach2d"), env, 50, seed=1)
    assert a.success_rate < 0.1
    assert a.to_dict() == b.to_dict()


def test_rollout_spec_mismatch(splits):
    m = build_model("mini", [splits[0][0]], 0)
    m.stats["reach2d"] = splits[0][0].stats
    with pytest.raises(RoutingError):
        rollout(HptPolicy(m, "reach2d"), ToyEnv(get_template("reach3d")), 1, 0)


# -- experiments ----------------------------------------------------------

def test_expand_grid():
    pts = expand_grid({"a": [1, 2], "b": 3, "c": ["x", "y"]})
    assert len(pts) == 4 and pts[0] == {"a": 1, "b": 3, "c": "x"}


def test_scaling_rows_schema_and_failures(tmp_path):
    corpus = [gen_synthetic_embodiment(n, 12, 0) for n in NAMES]
    base = small_cfg(total_steps=3)
    rows = run_scaling_experiment({"max_traj": [3, 8], "model_size": ["mini", "nope"]}, corpus, tmp_path,
                                  base, val_max=3)
    assert len(rows) == 4
    assert len({r["config_hash"] for r in rows}) == 4
    assert [r["status"] for r in rows].count("ok") == 2
    assert all(r["status"].startswith("error: ConfigError") for r in rows if r["model_size"] == "nope")
    with open(tmp_path / "scaling.csv") as f:
        reader = csv.reader(f)
        assert next(reader) == SCALING_COLUMNS
        assert len(list(reader)) == 4
    ok = [r for r in rows if r["status"] == "ok"][0]
    assert len(ok["per_dataset_val_losses"].split(";")) == 2


def test_compare_baselines_budgets(tmp_path):
    ds = gen_synthetic_embodiment("reach2d", 12, 0)
    base = HptModel(ModelConfig.from_size("mini"), RngState(0))
    rows = compare_baselines(ds, base, n_rollouts=2, tconfig=TransferConfig(steps=2, batch_size=4),
                             out_dir=tmp_path)
    assert [r["mode"] for r in rows] == ["no_trunk", "scratch", "frozen", "finetuned"]
    assert len({r["budget_hash"] for r in rows}) == 1
    assert len({r["config_hash"] for r in rows}) == 4
    assert (tmp_path / "baselines.json").exists()
    assert [r["freeze_trunk"] for r in rows] == [False, False, True, False]

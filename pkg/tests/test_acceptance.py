"""Acceptance criteria 1-13. Each test prints one PASS/FAIL line before asserting."""
import csv
import json
import struct
import time

import numpy as np
import pytest

from hpt import tensor as T
from hpt.checkpoint import from_bytes, load_checkpoint, save_checkpoint, tensor_digest
from hpt.cli import run as cli
from hpt.data import (ToyEnv, gen_synthetic_embodiment, get_template, load_dataset, split_train_val,
                      write_dataset)
from hpt.data.dataset import NormStats, normalize_action, unnormalize_action
from hpt.data.sampling import dataset_probs, sample_dataset_index
from hpt.errors import BadMagicError, ShapeMismatchError, TruncatedFileError, VersionMismatchError
from hpt.model import MODEL_SIZES, EmbodimentSpec, HptModel, ModelConfig, trunk_param_count
from hpt.nn import (AttentionParams, LayerNormParams, LinearParams, MlpParams, ParamRegistry,
                    TransformerBlockParams, attention, cross_attend, init_params, transformer_block)
from hpt.rng import RngState
from hpt.tensor import Tensor
from hpt.train import (ExpertPolicy, TrainConfig, TransferConfig, compare_baselines, pretrain,
                       rollout, run_scaling_experiment, train_loss, transfer)
from hpt.train.experiments import SCALING_COLUMNS, build_model

from conftest import gradcheck, perturb_registry, registry_gradcheck

pytestmark = pytest.mark.slow

PRETRAIN_NAMES = ["reach2d", "reach2d_swap", "reach3d", "reach3d_rot"]
F64 = np.float64


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# -- 1. parameter accounting ---------------------------------------------

REFERENCE_TRUNK = {"S": 3.1e6, "B": 12.6e6, "L": 50.5e6, "XL": 226.8e6}


def test_criterion_01_parameter_accounting(verdict):
    start = time.perf_counter()
    parts, ok = [], True
    for size, target in REFERENCE_TRUNK.items():
        n = HptModel.skeleton(ModelConfig.from_size(size)).count("trunk")
        dev = abs(n - target) / target
        depth, width, _ = MODEL_SIZES[size]
        ok &= dev < 0.03 and abs(n - 12 * width ** 2 * depth) / n < 0.01
        parts.append(f"{size}={n:,} ({dev:.2%})")
    wall = time.perf_counter() - start
    verdict(1, ok and wall < 10, f"{', '.join(parts)}; {wall:.2f}s")


def test_criterion_01_huge_analytic(verdict):
    cfg = ModelConfig.from_size("Huge")
    n = trunk_param_count(cfg)
    dev = abs(n - 1.1e9) / 1.1e9
    verdict(1, dev < 0.03, f"Huge (80,1024) analytic trunk {n:,} vs 1.1B ({dev:.2%}, 12*d^2*L = "
                           f"{12 * 1024 ** 2 * 80:,})")


# -- 2. gradient integrity -----------------------------------------------

def _weighted(out, seed=1):
    w = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return T.sum_(T.mul(out, w))


def _x(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def _block_cases():
    def linear_mlp():
        reg = ParamRegistry()
        lin = LinearParams.create(reg, "lin", 4, 6, RngState(0), F64)
        mlp = MlpParams.create(reg, "mlp", [6, 8, 3], RngState(1), F64)
        x = _x((2, 5, 4))
        return reg, lambda: _weighted(mlp(lin(x)))

    def layer_norm():
        reg = ParamRegistry()
        ln = LayerNormParams.create(reg, "ln", 8, F64)
        x = _x((3, 8))
        return reg, lambda: _weighted(ln(x))

    def self_attention(causal):
        def build():
            reg = ParamRegistry()
            p = AttentionParams.create(reg, "att", 8, 2, 4, RngState(0), F64)
            x = _x((2, 5, 8))
            return reg, lambda: _weighted(attention(x, x, x, p, causal=causal))
        return build

    def cross_attention():
        reg = ParamRegistry()
        tok = reg.add("tok", init_params((4, 8), "normal", RngState(2), F64))
        p = AttentionParams.create(reg, "att", 8, 2, 4, RngState(0), F64)
        ctx = _x((3, 6, 8))
        pe = T.sinusoidal_pe(6, 8, F64)
        return reg, lambda: _weighted(cross_attend(tok, ctx, p, key_pos=pe))

    def block():
        reg = ParamRegistry()
        p = TransformerBlockParams.create(reg, "blk", 8, 2, RngState(0), F64)
        x = _x((2, 5, 8))
        return reg, lambda: _weighted(transformer_block(x, p))

    def end_to_end():
        m = HptModel(ModelConfig.from_size("mini", dtype="float64"), RngState(0))
        spec = EmbodimentSpec("a", 3, 2, (2, 2, 2))
        m.register_embodiment(spec, RngState(1))
        g = np.random.default_rng(5)
        p, v = g.normal(size=(2, 2, 3)), g.random((2, 2, 2, 2, 2))
        target = g.normal(size=(2, 8, 2)) * 0.3
        mask = np.ones((2, 8, 2))
        mask[0, 5:] = 0
        return m.registry, lambda: T.huber_loss(m.forward("a", p, v), target, 0.1, mask)

    return {"linear+mlp": linear_mlp, "layer_norm": layer_norm, "attention": self_attention(False),
            "causal_attention": self_attention(True), "cross_attention": cross_attention,
            "transformer_block": block, "hpt_mini_end_to_end": end_to_end}


def _masked_influence():
    m = HptModel(ModelConfig.from_size("mini", dtype="float64"), RngState(0))
    spec = EmbodimentSpec("a", 3, 2, (2, 2, 2))
    m.register_embodiment(spec, RngState(1))
    perturb_registry(m.registry, 0.05)
    g = np.random.default_rng(2)
    p, v = g.normal(size=(2, 4, 3)), g.random((2, 4, 2, 2, 2))
    target = g.normal(size=(2, 8, 2))
    mask = np.ones_like(target)
    mask[:, 4:] = 0

    def run(tgt):
        m.registry.zero_grad()
        loss = T.huber_loss(m.forward("a", p, v), tgt, 0.1, mask)
        T.backward(loss)
        return float(loss.data), {n: t.grad.copy() for n, t in m.registry.items()}
    l1, g1 = run(target)
    shifted = target.copy()
    shifted[:, 4:] += 100.0
    l2, g2 = run(shifted)
    return l1 == l2 and all(np.array_equal(g1[n], g2[n]) for n in g1)


def test_criterion_02_gradient_integrity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1234)
    errs = {
        "matmul": gradcheck(T.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))),
        "softmax": gradcheck(lambda t: T.softmax(t, -1), rng.normal(size=(3, 6))),
        "layer_norm_op": gradcheck(T.layer_norm, rng.normal(size=(3, 8)), rng.normal(size=8),
                                   rng.normal(size=8)),
        "gelu": gradcheck(T.gelu, rng.normal(size=(3, 4))),
    }
    for name, build in _block_cases().items():
        reg, loss = build()
        perturb_registry(reg, 0.05)
        errs[name], _ = registry_gradcheck(reg, loss, per_tensor=4)
    masked_ok = _masked_influence()
    wall = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-5 and masked_ok and wall < 120
    verdict(2, ok, f"max rel err {errs[worst]:.2e} ({worst}) over {len(errs)} cases; masked targets inert="
                   f"{masked_ok}; {wall:.1f}s")


# -- 3. Huber --------------------------------------------------------------

def test_criterion_03_huber(verdict):
    def h(r):
        return float(T.huber_loss(Tensor(np.array([r])), np.zeros(1), 0.1, np.ones(1)).data)
    got = {r: h(r) for r in (0.0, 0.05, 1.0)}
    want = {0.0: 0.0, 0.05: 0.00125, 1.0: 0.095}
    ok = all(got[r] == want[r] for r in want)
    verdict(3, ok, ", ".join(f"L({r})={got[r]!r} (want {want[r]!r})" for r in want))


# -- 4. sampler ----------------------------------------------------------

def test_criterion_04_sampler(verdict):
    sizes, n = [100, 400, 900], 100_000
    r = RngState(2024)
    counts = np.bincount([sample_dataset_index(sizes, r) for _ in range(n)], minlength=3)
    p = np.array([1, 2, 3]) / 6
    z = np.abs(counts - n * p) / np.sqrt(n * p * (1 - p))
    invariant = np.array_equal(dataset_probs(sizes), dataset_probs([10 * s for s in sizes]))
    verdict(4, bool(np.all(z <= 3)) and invariant,
            f"counts {counts.tolist()}, |z| max {z.max():.2f}; scale-invariant={invariant}")


# -- 5. normalisation ------------------------------------------------------

def test_criterion_05_normalization(verdict):
    g = np.random.default_rng(7)
    a = g.normal(size=(2000, 6)) * [1, 50, 1e-3, 3, 7, 1]
    a[:, 5] = -4.25
    s = NormStats(a.min(0), a.max(0), np.zeros(0), np.zeros(0))
    n = normalize_action(a, s)
    err = float(np.abs(unnormalize_action(n, s) - a).max())
    cols = range(5)
    ends = bool(np.all(n[a[:, :5].argmin(0), cols] == -1.0) and np.all(n[a[:, :5].argmax(0), cols] == 1.0))
    degenerate = bool(np.all(n[:, 5] == 0.0) and not np.isnan(n).any())
    verdict(5, err < 1e-5 and ends and degenerate,
            f"roundtrip max err {err:.2e}; extremes exact={ends}; degenerate->0={degenerate}")


# -- 6. fixed token count --------------------------------------------------

def test_criterion_06_fixed_tokens(verdict):
    m = HptModel(ModelConfig.from_size("mini"), RngState(0))
    bad = []
    cases = 0
    for d_p in (0, 3, 7, 24):
        for grid in ((4, 4, 2), (7, 7, 8)):
            spec = EmbodimentSpec(f"e{d_p}_{grid[0]}", d_p, 2, grid)
            m.register_embodiment(spec, RngState(1))
            for t_obs in (1, 2, 3, 4):
                g = np.random.default_rng(t_obs)
                p = g.normal(size=(1, t_obs, d_p)) if d_p else None
                v = g.random((1, t_obs) + grid)
                n = m.tokens(spec.id, p, v).shape[1]
                cases += 1
                if n != (16 if d_p == 0 else 32):
                    bad.append((d_p, t_obs, grid, n))
    verdict(6, not bad, f"{cases} cases, mismatches {bad}")


# -- 7. freeze and routing -------------------------------------------------

def test_criterion_07_freeze_and_routing(verdict, tmp_path):
    splits = [split_train_val(gen_synthetic_embodiment(n, 20, 0)) for n in ("reach2d", "reach3d")]
    base = build_model("mini", [t for t, _ in splits], 0)
    pretrain(TrainConfig(base_lr=1e-3, batch_size=8, reference_batch=8, total_steps=20, workers=2),
             splits, base, tmp_path / "pt")
    ckpt = load_checkpoint(tmp_path / "pt/checkpoint.hptc")
    before = tensor_digest(ckpt, "trunk")
    new = split_train_val(gen_synthetic_embodiment("reach2d_new", 20, 1))
    r = transfer(TransferConfig(mode="frozen", steps=200, lr=1e-3, batch_size=8), new, ckpt)
    frozen_ok = tensor_digest(r.model, "trunk") == before and len(r.trace) == 200

    m = build_model("mini", [t for t, _ in splits], 0)
    unsampled = tensor_digest(m, "stem.reach3d") + tensor_digest(m, "head.reach3d")
    res = pretrain(TrainConfig(base_lr=1e-3, batch_size=8, reference_batch=8, total_steps=20, workers=2),
                   splits[:1], m)
    routing_ok = (tensor_digest(m, "stem.reach3d") + tensor_digest(m, "head.reach3d") == unsampled
                  and not any(n.startswith(("stem.reach3d", "head.reach3d")) for n in res.optimizer.m))
    verdict(7, frozen_ok and routing_ok,
            f"trunk sha256 unchanged after 200 frozen steps={frozen_ok}; unsampled stem/head unchanged="
            f"{routing_ok}")


# -- 8. determinism --------------------------------------------------------

def test_criterion_08_determinism(verdict, tmp_path):
    start = time.perf_counter()
    splits = [split_train_val(gen_synthetic_embodiment(n, 30, 0)) for n in PRETRAIN_NAMES]
    cfg = TrainConfig(base_lr=4e-3, batch_size=16, total_steps=500, seed=11)
    runs = []
    for i in range(2):
        m = build_model("S-mini", [t for t, _ in splits], 11)
        runs.append(pretrain(cfg, splits, m, tmp_path / str(i)))
    same_trace = (tmp_path / "0/trace.csv").read_bytes() == (tmp_path / "1/trace.csv").read_bytes()
    same_ckpt = (tmp_path / "0/checkpoint.hptc").read_bytes() == (tmp_path / "1/checkpoint.hptc").read_bytes()
    wall = time.perf_counter() - start
    verdict(8, same_trace and same_ckpt and len(runs[0].trace) == 500 and wall < 300,
            f"traces identical={same_trace}, checkpoints identical={same_ckpt}; {wall:.1f}s")


# -- 9. overfit oracle -----------------------------------------------------

def test_criterion_09_overfit(verdict):
    start = time.perf_counter()
    ds = gen_synthetic_embodiment("reach2d", 10, 0)
    base = HptModel.skeleton(ModelConfig.from_size("S-mini"))
    tc = TransferConfig(mode="scratch", steps=5000, lr=1e-3, batch_size=16, eval_interval=100,
                        stem_mlp_layers=2)
    r = transfer(tc, (ds, None), base, stop_at_train_loss=1e-3)
    loss = train_loss(r, [ds])
    wall = time.perf_counter() - start
    verdict(9, loss <= 1e-3 and len(r.trace) <= 5000 and wall < 600,
            f"train loss {loss:.3e} after {len(r.trace)} steps (d=64, depth=4); {wall:.1f}s")


# -- 10. heterogeneous pre-training smoke ----------------------------------

CRIT10_THRESHOLD = 0.5   # reference run: 0.0463 -> 0.00172, ratio 0.037


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("crit10")
    splits = [split_train_val(gen_synthetic_embodiment(n, 200, 0)) for n in PRETRAIN_NAMES]
    model = build_model("S-mini", [t for t, _ in splits], 0)
    cfg = TrainConfig(base_lr=4e-3, batch_size=32, total_steps=3000, eval_interval=500)
    start = time.perf_counter()
    result = pretrain(cfg, splits, model, out)
    return result, out / "checkpoint.hptc", time.perf_counter() - start


def test_criterion_10_pretrain_smoke(verdict, pretrained):
    result, _, wall = pretrained
    first, last = result.reports[0].average, result.reports[-1].average
    ratio = last / first
    curve = ", ".join(f"{r.step}:{r.average:.4f}" for r in result.reports)
    verdict(10, ratio <= CRIT10_THRESHOLD and result.reports[-1].step == 3000 and wall < 1200,
            f"avg val {first:.4f} -> {last:.4f} (ratio {ratio:.3f} <= {CRIT10_THRESHOLD}); curve {curve}; "
            f"{wall:.0f}s")


# -- 11. closed loop -------------------------------------------------------

def test_criterion_11_closed_loop(verdict, pretrained, tmp_path):
    start = time.perf_counter()
    _, ckpt, _ = pretrained
    env = ToyEnv(get_template("reach2d"))
    expert = rollout(ExpertPolicy(env), env, 50, seed=0)

    pair = split_train_val(gen_synthetic_embodiment("reach2d", 125, 1))
    tc = TransferConfig(lr=1e-3, steps=1000, batch_size=32)
    rows = compare_baselines(pair, ckpt, n_rollouts=50, tconfig=tc, out_dir=tmp_path)
    by_mode = {r["mode"]: r for r in rows}
    scratch = by_mode["scratch"]["success_rate"]
    same_budget = len({r["budget_hash"] for r in rows}) == 1
    wall = time.perf_counter() - start
    table = ", ".join(f"{m}={r['success_rate']:.2f}" for m, r in by_mode.items())
    ok = (expert.success_rate == 1.0 and len(pair[0]) == 100 and scratch >= 0.9
          and list(by_mode) == ["no_trunk", "scratch", "frozen", "finetuned"] and same_budget and wall < 1800)
    verdict(11, ok, f"expert {expert.success_rate:.2f}/50; scratch with {len(pair[0])} demos {scratch:.2f}; "
                    f"modes {table} (pretrained-finetuned {by_mode['finetuned']['success_rate']:.2f}); "
                    f"identical budgets={same_budget}; {wall:.0f}s")


# -- 12. data scaling -------------------------------------------------------

def test_criterion_12_data_scaling(verdict, tmp_path):
    start = time.perf_counter()
    corpus = [gen_synthetic_embodiment(n, 1250, 0) for n in PRETRAIN_NAMES]
    base = TrainConfig(base_lr=4e-3, batch_size=32, total_steps=1000, model_size="S-mini")
    rows = run_scaling_experiment({"max_traj": [10, 100, 1000]}, corpus, tmp_path, base)
    with open(tmp_path / "scaling.csv") as f:
        reader = csv.reader(f)
        header = next(reader)
        body = list(reader)
    by_traj = {int(r["max_traj"]): float(r["avg_val_loss"]) for r in rows if r["status"] == "ok"}
    wall = time.perf_counter() - start
    ok = (header == SCALING_COLUMNS and len(body) == 3 and len(by_traj) == 3
          and by_traj[1000] <= by_traj[10] and wall < 2700)
    verdict(12, ok, f"avg val by max_traj {by_traj}; schema exact={header == SCALING_COLUMNS}; {wall:.0f}s")


# -- 13. formats -----------------------------------------------------------

def _expect(exc, fn):
    try:
        fn()
    except exc:
        return True
    except Exception:
        return False
    return False


def test_criterion_13_formats(verdict, tmp_path):
    ds = gen_synthetic_embodiment("reach3d_rot", 12, 0)
    write_dataset(ds, tmp_path / "a")
    write_dataset(load_dataset(tmp_path / "a"), tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    ds_ok = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    m = build_model("mini", [ds], 0)
    m.stats[ds.spec.id] = ds.stats
    p1 = save_checkpoint(m, tmp_path / "a.hptc")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "b.hptc")
    ck_ok = p1.read_bytes() == p2.read_bytes()

    buf = p1.read_bytes()
    wrong_version = buf[:4] + struct.pack("<I", 99) + buf[8:]
    classes = {
        "bad magic": _expect(BadMagicError, lambda: from_bytes(b"NOPE" + buf[4:])),
        "version": _expect(VersionMismatchError, lambda: from_bytes(wrong_version)),
        "truncated": _expect(TruncatedFileError, lambda: from_bytes(buf[:-7])),
        "trailing": _expect(ShapeMismatchError, lambda: from_bytes(buf + b"\0")),
    }
    (tmp_path / "bad.hptc").write_bytes(b"NOPE" + buf[4:])
    (tmp_path / "short.hptc").write_bytes(buf[:-7])
    ep = tmp_path / "a" / files[0]
    ep.write_bytes(ep.read_bytes()[:-3])
    classes["episode truncated"] = _expect(TruncatedFileError, lambda: load_dataset(tmp_path / "a"))
    codes = {
        "inspect bad magic": cli(["inspect", str(tmp_path / "bad.hptc"), "--out", str(tmp_path / "o")]),
        "inspect truncated": cli(["inspect", str(tmp_path / "short.hptc"), "--out", str(tmp_path / "o")]),
        "pretrain corrupt dataset": cli(["pretrain", "--out", str(tmp_path / "o"), "--set",
                                         f"data.roots={json.dumps([str(tmp_path / 'a')])}",
                                         "--set", "model.size=mini", "--set", "train.steps=1"]),
        "pretrain missing root": cli(["pretrain", "--out", str(tmp_path / "o"), "--set",
                                      'data.roots=["/nonexistent"]']),
    }
    want = {"inspect bad magic": 2, "inspect truncated": 2, "pretrain corrupt dataset": 2,
            "pretrain missing root": 1}
    ok = ds_ok and ck_ok and all(classes.values()) and codes == want
    verdict(13, ok, f"dataset roundtrip={ds_ok}, checkpoint roundtrip={ck_ok}; error classes {classes}; "
                    f"exit codes {codes}")


def test_all_criteria_have_a_test():
    names = [n for n in globals() if n.startswith("test_criterion_")]
    assert {int(n.split("_")[2]) for n in names} == set(range(1, 14))

"""Acceptance criteria, one test each; every test records a single PASS/FAIL line.

The desk-scale run (criteria 4 to 6) trains the full pipeline once per session
with the built-in desk profile and takes several minutes on one core.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest

from heartlang import pipeline
from heartlang.config import load_config
from heartlang.evaluation import macro_auc
from heartlang.optim import OptimizerState, ScheduleConfig, lr_at, optimizer_step
from heartlang.pretrain import init_pretrain_model, masked_forward
from heartlang.signal_core import MorphologyParams, synthesize_ecg
from heartlang.st_ecgformer import DecoderConfig
from heartlang.tokenizer import TokenizerConfig, detect_qrs, tokenize
from heartlang.training import moving_average
from heartlang.vq import VQConfig, Vocabulary, quantize
from heartlang.vq_train import init_vq_model, vq_forward

from helpers import gradcheck, tiny_encoder_config, verdict

pytestmark = pytest.mark.acceptance

SMALL = {
    "synth": {"n_records": 40},
    "tokenizer": {"l": 48, "leads": ["I", "II"]},
    "encoder": {"depth": 1, "hidden": 16, "heads": 2, "mlp": 32, "conv_channels": [4, 8]},
    "vq": {"k": 16, "d": 8, "hidden": 16, "encoder_depth": 1, "decoder_depth": 1, "heads": 2, "mlp": 32,
           "optim": {"epochs": 3, "warmup_epochs": 1, "batch_size": 16}},
    "pretrain": {"optim": {"epochs": 3, "warmup_epochs": 1, "batch_size": 16}},
    "eval": {"subset_seeds": [0, 1], "probe": {"epochs": 5, "warmup_epochs": 1, "batch_size": 16}},
}


def small_config(seed=0):
    return load_config(profile="desk", overrides={**SMALL, "seed": seed, "deterministic": True})


def match_counts(found, truth, window=3):
    """Greedy one-to-one matching; returns the number of matched pairs."""
    used, hits = set(), 0
    for f in found:
        for j, g in enumerate(truth):
            if j not in used and abs(int(f) - int(g)) <= window:
                used.add(j)
                hits += 1
                break
    return hits


# -- 1 -----------------------------------------------------------------------------------

def test_c1_tokenizer():
    cfg = TokenizerConfig()
    records = [synthesize_ecg(bpm, morphology_params=MorphologyParams(noise_std=0.0), rng_seed=s)
               for bpm in (40, 60, 100, 150) for s in range(25)]
    t0 = time.perf_counter()
    sentences = [tokenize(r, cfg) for r in records]
    elapsed = time.perf_counter() - t0
    tp = n_found = n_true = 0
    exact = True
    for r in records:
        found = detect_qrs(r).indices
        truth = r.annotations["qrs_samples"]
        tp += match_counts(found, truth)
        n_found += len(found)
        n_true += len(truth)
        exact &= len(found) == len(truth)
    sens, prec = tp / n_true, tp / n_found
    shapes = all(s.words.shape == (cfg.l, cfg.t) and s.pad_mask.shape == (cfg.l,) for s in sentences)
    pads = all(np.array_equal(s.pad_mask, (s.spatial_ids == 0) & (s.temporal_ids == 0) & ~s.words.any(1))
               for s in sentences)
    ok = sens >= 0.98 and prec >= 0.98 and exact and shapes and pads and elapsed < 5.0
    verdict(1, "tokenizer correctness", ok,
            f"sensitivity={sens:.4f} precision={prec:.4f} counts_exact={exact} shapes={shapes} "
            f"pad_invariant={pads} tokenize_100={elapsed:.2f}s")


# -- 2 -----------------------------------------------------------------------------------

def cosine_argmax(p, codewords):
    """Oracle: explicit cosine similarity of each row against every codeword."""
    out = []
    for row in p:
        sims = [float(row @ c) / (np.linalg.norm(row) * np.linalg.norm(c)) for c in codewords]
        out.append(int(np.argmax(sims)))
    return np.asarray(out)


def test_c2_quantizer_oracle():
    rng = np.random.default_rng(2024)
    agree = scale_ok = 0
    for _ in range(1000):
        k = int(rng.integers(1, 513))
        d = int(rng.integers(2, 17))
        n = int(rng.integers(1, 9))
        cw = rng.standard_normal((k, d))
        cw /= np.linalg.norm(cw, axis=1, keepdims=True)
        vocab = Vocabulary(cw, np.zeros(k), np.zeros((k, d)), np.zeros(k, np.int64), 0.99, 1e-5)
        p = rng.standard_normal((n, d))
        idx = quantize(p, vocab).indices
        agree += np.array_equal(idx, cosine_argmax(p, cw))
        c = rng.uniform(0.0, 10.0)
        while c == 0.0:
            c = rng.uniform(0.0, 10.0)
        scale_ok += np.array_equal(quantize(c * p, vocab).indices, idx)
    verdict(2, "quantizer oracle equivalence", agree == 1000 and scale_ok == 1000,
            f"oracle agreement {agree}/1000, scale invariance {scale_ok}/1000")


# -- 3 -----------------------------------------------------------------------------------

def toy_batch(rng, l=8, t=12):
    words = rng.standard_normal((2, l, t))
    sp = rng.integers(1, 13, (2, l))
    tp = rng.integers(1, 11, (2, l))
    return words, sp, tp, np.zeros((2, l), bool)


def test_c3_gradient_integrity():
    rng = np.random.default_rng(3)
    enc = tiny_encoder_config(depth=2, hidden=16, heads=2, mlp=32, patch_width=12, max_len=8,
                              conv_kernels=(3, 3), conv_strides=(2, 1))
    words, sp, tp, pad = toy_batch(rng)

    vq = init_vq_model(enc, DecoderConfig(depth=2, hidden=16, heads=2, mlp=32, in_dim=8, out_dim=12),
                       VQConfig(k=16, d=8), 0).astype(np.float64)
    err_v, _ = gradcheck(lambda: vq_forward(vq, words, sp, tp, pad).loss, vq.parameters(), rng, per_group=4)

    pm = init_pretrain_model(enc, 16, 0).astype(np.float64)
    mask = np.zeros((2, 8), bool)
    mask[0, [1, 4, 5]] = True
    mask[1, [0, 3, 7]] = True
    targets = rng.integers(0, 16, (2, 8))
    err_p, _ = gradcheck(lambda: masked_forward(pm, words, sp, tp, pad, mask, targets)[0],
                         pm.parameters(), rng, per_group=4)
    fv, fp = float((err_v < 1e-4).mean()), float((err_p < 1e-4).mean())
    verdict(3, "gradient integrity", fv >= 0.99 and fp >= 0.99,
            f"L_V {fv:.3f} of {err_v.size} coords within 1e-4, L_P {fp:.3f} of {err_p.size} coords within 1e-4")


# -- 4 to 6: one desk-scale pipeline run -------------------------------------------------

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    cfg = load_config(profile="desk")
    out = tmp_path_factory.mktemp("desk")
    t0 = time.perf_counter()
    res = pipeline.cmd_run(cfg, out)
    res["elapsed"] = time.perf_counter() - t0
    res["cfg"] = cfg
    return res


def read_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_c4_vq_learning_signal(desk_run):
    vq = desk_run["arms"]["heartbeat"]["vq"]
    cfg = desk_run["cfg"]
    log = read_log(Path(vq["dir"]) / "train_log.csv")
    first, final = vq["first_valid_mse"], vq["final_valid_mse"]
    eff, k = vq["effective_size"], vq["k"]
    ok = len(log) == cfg.vq.optim.epochs == 50 and final <= 0.5 * first and 1 < eff < k
    verdict(4, "VQ-HBR learning signal", ok,
            f"{len(log)} epochs on {cfg.synth.n_records} records, valid MSE {first:.4f} -> {final:.4f} "
            f"(ratio {final / first:.3f}), effective usage {eff}/{k}, full desk run {desk_run['elapsed']:.0f}s "
            f"on this host")


def test_c5_masked_pretraining_signal(desk_run):
    pre = desk_run["arms"]["heartbeat"]["pretrain"]
    log = read_log(Path(pre["dir"]) / "train_log.csv")

    def worst_drop(column):
        ma = moving_average([float(r[column]) for r in log], 10)
        return max(0.0, -float(np.diff(ma).min())) if ma.size > 1 else 0.0

    # the asserted curve re-scores a fixed set of training sentences under one mask draw;
    # the running minibatch curve also carries mask-sampling noise and is reported only
    fixed, running = worst_drop("train_fixed_masked_accuracy"), worst_drop("train_masked_accuracy")
    acc, chance = pre["valid_masked_accuracy"], pre["chance"]
    ok = acc >= 10 * chance and fixed == 0.0
    verdict(5, "masked pre-training signal", ok,
            f"held-out masked accuracy {acc:.4f} vs 10x chance {10 * chance:.4f} (k_eff={pre['k_effective']}); "
            f"10-epoch MA largest drop: fixed-mask accuracy curve {fixed:.2e}, running minibatch curve {running:.2e}")


def test_c6_probe_pipeline(desk_run):
    rows = desk_run["rows"]

    def mean_auc(task):
        vals = [r["test_auc"] for r in rows if r["task"] == task and r["fraction"] == 0.1]
        return float(np.mean(vals))

    pre, rnd = mean_auc("heartbeat/pretrained"), mean_auc("heartbeat/random_init")
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n, c = int(rng.integers(4, 30)), int(rng.integers(1, 5))
        s = np.round(rng.standard_normal((n, c)), 1)
        y = rng.integers(0, 2, (n, c))
        y[0], y[1] = 0, 1   # every class has both outcomes
        oracle = np.mean([np.mean([(p > q) + 0.5 * (p == q) for p in s[y[:, j] == 1, j] for q in s[y[:, j] == 0, j]])
                          for j in range(c)])
        worst = max(worst, abs(macro_auc(s, y) - oracle))
    ok = pre - rnd >= 0.05 and worst <= 1e-12
    verdict(6, "probe pipeline", ok,
            f"10% fraction test macro AUC pretrained {pre:.4f} vs random init {rnd:.4f} "
            f"(gap {pre - rnd:+.4f}, need >= +0.05), pairwise-oracle max error {worst:.1e}")


# -- 7 -----------------------------------------------------------------------------------

def test_c7_slicing_harness(tmp_path):
    res = pipeline.cmd_compare_slicing(small_config(), tmp_path)
    with open(tmp_path / "slicing_report.csv", newline="") as fh:
        report = list(csv.DictReader(fh))
    fractions = [float(r["fraction"]) for r in report]
    finite = all(np.isfinite(float(r[c])) for r in report for c in ("heartbeat_auc", "fixed_window_auc"))
    modes = {r["task"].split("/")[0] for r in res["rows"]}
    ok = fractions == [0.01, 0.1, 1.0] and finite and modes == {"heartbeat", "fixed_window"}
    gaps = ", ".join(f"{float(r['fraction']):g}: {float(r['gap']):+.3f}" for r in report)
    verdict(7, "slicing-perspective harness", ok, f"both arms reported at {fractions}; heartbeat minus "
            f"fixed-window gap (reported, not asserted) {gaps}")


# -- 8 -----------------------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    cfg = small_config(seed=0)
    pipeline.cmd_run(cfg, tmp_path / "a")
    pipeline.cmd_run(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    verdict(8, "determinism", len(files) > 0 and all(same),
            f"{sum(same)}/{len(files)} metric CSVs byte-equal across two seed-0 runs")


# -- 9 -----------------------------------------------------------------------------------

def test_c9_closed_forms():
    checks = {}
    s = ScheduleConfig(peak_lr=5e-4, min_lr=1e-5, warmup_epochs=5, total_epochs=200, steps_per_epoch=10)
    checks["lr(0)=0"] = abs(lr_at(0, s)) <= 1e-12
    checks["lr(1)=peak/warmup"] = abs(lr_at(1, s) - 5e-4 / 50) <= 1e-12
    checks["lr(end of warmup)=peak"] = abs(lr_at(50, s) - 5e-4) <= 1e-12
    checks["lr(final)=min"] = abs(lr_at(2000, s) - 1e-5) <= 1e-12

    p = {"x": np.array([3.0])}
    optimizer_step(p, {"x": np.array([0.0])}, OptimizerState(betas=(0.9, 0.999)), lr=0.1)
    checks["g=0 unchanged"] = p["x"][0] == 3.0

    p = {"x": np.array([3.0])}
    optimizer_step(p, {"x": np.array([2.0])}, OptimizerState(betas=(0.0, 0.0), eps=0.0), lr=1.0)
    checks["sign step"] = abs(p["x"][0] - 2.0) <= 1e-12
    p = {"x": np.array([3.0])}
    optimizer_step(p, {"x": np.array([2.0])}, OptimizerState(betas=(0.0, 0.0)), lr=1.0)
    checks["sign step with eps"] = abs((3.0 - p["x"][0]) - 2.0 / (2.0 + 1e-8)) <= 1e-12

    p = {"x": np.array([3.0])}
    optimizer_step(p, {"x": np.array([0.0])}, OptimizerState(betas=(0.9, 0.999), weight_decay=0.05), lr=0.1)
    checks["pure decay"] = abs(p["x"][0] - 3.0 * (1 - 0.1 * 0.05)) <= 1e-12
    failed = [k for k, v in checks.items() if not v]
    verdict(9, "schedule/optimizer closed forms", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} hold to 1e-12" + (f"; failed {failed}" if failed else ""))

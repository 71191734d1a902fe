import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartlang.errors import ConfigError, MetricUndefinedError
from heartlang.evaluation import (FeatureExtractor, ProbeConfig, binary_auc, extract_features, low_resource_subset,
                                  macro_auc, macro_auc_report, subset_size, train_probe)
from heartlang.st_ecgformer import init_encoder
from heartlang.storage import checkpoint_hash, save_checkpoint
from heartlang.tokenizer import LEAD_CONFIGS

from helpers import tiny_corpus, tiny_encoder_config


def pairwise_auc(s, y):
    """O(n^2) oracle: fraction of (positive, negative) pairs ranked correctly, ties half."""
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def pairwise_macro(s, y):
    cols = [c for c in range(y.shape[1]) if 0 < y[:, c].sum() < len(y)]
    return float(np.mean([pairwise_auc(s[:, c], y[:, c]) for c in cols]))


@pytest.mark.usefixtures("backend")
class TestAUC:
    def test_perfect(self):
        assert binary_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_ties(self):
        assert binary_auc([0.5, 0.5, 0.5], [0, 1, 0]) == 0.5

    def test_oracle_30x4(self, rng):
        s = np.round(rng.standard_normal((30, 4)), 1)   # rounding forces ties
        y = (rng.random((30, 4)) > 0.6).astype(int)
        assert abs(macro_auc(s, y) - pairwise_macro(s, y)) < 1e-12

    @settings(max_examples=40)
    @given(st.integers(0, 2**31), st.integers(2, 40), st.integers(1, 5))
    def test_oracle_random(self, seed, n, L):
        r = np.random.default_rng(seed)
        s = r.integers(0, 6, (n, L)).astype(float)
        y = r.integers(0, 2, (n, L))
        if not any(0 < y[:, c].sum() < n for c in range(L)):
            with pytest.raises(MetricUndefinedError):
                macro_auc(s, y)
            return
        assert abs(macro_auc(s, y) - pairwise_macro(s, y)) < 1e-12

    @settings(max_examples=30)
    @given(st.integers(0, 2**31))
    def test_monotone_invariance_and_complement(self, seed):
        r = np.random.default_rng(seed)
        s = r.standard_normal((40, 3))
        y = np.zeros((40, 3), int)
        y[:20] = 1
        y = r.permuted(y, axis=0)
        base = macro_auc(s, y)
        assert abs(macro_auc(np.exp(2 * s) + 3, y) - base) < 1e-12
        assert abs(macro_auc(-s, y) + base - 1) < 1e-12

    def test_chance(self, rng):
        s = rng.random((4000, 2))
        y = (rng.random((4000, 2)) > 0.5).astype(int)
        assert abs(macro_auc(s, y) - 0.5) < 0.03

    def test_degenerate_skipped(self, caplog):
        rep = macro_auc_report(np.array([[0.1, 0.2], [0.9, 0.3]]), np.array([[0, 1], [1, 1]]), ["a", "b"])
        assert rep["skipped"] == ["b"] and rep["per_class"] == {"a": 1.0}
        with pytest.raises(MetricUndefinedError):
            macro_auc(np.zeros((3, 1)), np.ones((3, 1)))


class TestSubsets:
    def test_identity(self):
        idx = np.arange(50, 80)
        np.testing.assert_array_equal(low_resource_subset(idx, 1.0, 3), idx)

    def test_sizes(self):
        assert subset_size(1000, 0.01) == 10 and subset_size(5, 0.01) == 1
        assert len(low_resource_subset(np.arange(1000), 0.01, 0)) == 10
        with pytest.raises(ConfigError):
            subset_size(10, 0.0)

    @given(st.integers(1, 500), st.integers(0, 100))
    def test_nested_and_deterministic(self, n, seed):
        idx = np.arange(n) * 3
        small = low_resource_subset(idx, 0.01, seed)
        mid = low_resource_subset(idx, 0.1, seed)
        big = low_resource_subset(idx, 1.0, seed)
        assert set(small) <= set(mid) <= set(big)
        np.testing.assert_array_equal(mid, low_resource_subset(idx, 0.1, seed))


def test_lead_configs():
    assert LEAD_CONFIGS[1] == ("I",)
    assert LEAD_CONFIGS[6] == ("I", "II", "III", "aVR", "aVL", "aVF")


class TestProbe:
    def toy(self, rng, n=300, separable=True):
        X = rng.standard_normal((n, 5))
        if separable:
            Y = np.stack([X[:, 0] > 0, X[:, 1] + X[:, 2] > 0.3], 1).astype(float)
            # open a margin around both decision boundaries
            X[:, 0] += np.where(Y[:, 0] > 0, 1.0, -1.0)
            X[:, 1] += np.where(Y[:, 1] > 0, 1.0, -1.0)
        else:
            Y = (rng.random((n, 2)) > 0.5).astype(float)
        split = np.array(["train"] * (n // 2) + ["valid"] * (n // 4) + ["test"] * (n - n // 2 - n // 4))
        return X, Y, split

    def test_separable(self, rng):
        X, Y, split = self.toy(rng)
        head = train_probe(X, Y, split, ProbeConfig(epochs=100, warmup_epochs=5, batch_size=64))
        assert head.valid_auc == pytest.approx(1.0, abs=1e-3)
        te = split == "test"
        assert macro_auc(head.scores(X[te]), Y[te]) > 0.99

    def test_null_band(self, rng):
        X, Y, split = self.toy(rng, n=500, separable=False)
        head = train_probe(X, Y, split, ProbeConfig(epochs=50, warmup_epochs=5, batch_size=64))
        te = split == "test"
        assert 0.4 <= macro_auc(head.scores(X[te]), Y[te]) <= 0.6

    def test_best_epoch_selection(self, rng):
        X, Y, split = self.toy(rng)
        head = train_probe(X, Y, split, ProbeConfig(epochs=30, warmup_epochs=2, batch_size=64))
        assert len(head.history) == 30
        assert head.epoch == int(np.argmax(head.history)) + 1
        assert head.valid_auc == max(head.history)

    def test_class_missing_from_valid(self, rng, caplog):
        X, Y, split = self.toy(rng)
        Y[split == "valid", 1] = 0
        head = train_probe(X, Y, split, ProbeConfig(epochs=5, warmup_epochs=1))
        assert "excluded" in caplog.text and np.isfinite(head.valid_auc)

    def test_deterministic(self, rng):
        X, Y, split = self.toy(rng)
        cfg = ProbeConfig(epochs=10, warmup_epochs=1, batch_size=32)
        a, b = train_probe(X, Y, split, cfg, seed=4), train_probe(X, Y, split, cfg, seed=4)
        np.testing.assert_array_equal(a.weight, b.weight)


@pytest.fixture(scope="module")
def setup():
    return tiny_corpus(n=12, l=24), init_encoder(tiny_encoder_config(), 0)


class TestFeatures:
    def test_shape_and_determinism(self, setup):
        corpus, enc = setup
        a = extract_features(corpus, enc)
        assert a.shape == (12, 16)
        np.testing.assert_array_equal(a, extract_features(corpus, enc, batch_size=5))

    def test_cache_counter(self, setup, tmp_path):
        corpus, enc = setup
        fx = FeatureExtractor(tmp_path)
        a = fx(corpus, enc, "abc")
        b = fx(corpus, enc, "abc")
        assert fx.encoder_runs == 1
        np.testing.assert_array_equal(a, b)
        fx(corpus, enc, "abc", pooling="mean")
        assert fx.encoder_runs == 2

    def test_mismatch(self, setup):
        corpus, _ = setup
        with pytest.raises(ConfigError):
            extract_features(corpus, init_encoder(tiny_encoder_config(max_len=16), 0))

    def test_probe_leaves_encoder_untouched(self, setup, tmp_path):
        corpus, enc = setup
        save_checkpoint(tmp_path / "a", enc.arrays(), {})
        before = checkpoint_hash(tmp_path / "a")
        feats = extract_features(corpus, enc)
        train_probe(feats, corpus.labels, np.where(np.arange(12) < 8, "train", "valid"), ProbeConfig(epochs=3,
                    warmup_epochs=1))
        save_checkpoint(tmp_path / "b", enc.arrays(), {})
        assert checkpoint_hash(tmp_path / "b") == before

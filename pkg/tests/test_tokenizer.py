import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartlang.errors import ConfigError, EmptyTokenizationError
from heartlang.signal_core import EcgRecord, MorphologyParams, synthesize_ecg
from heartlang.tokenizer import (EcgWord, QrsIndices, TokenizerConfig, build_sentence, detect_qrs, lead_subset,
                                 segment_words, tokenize, tokenize_fixed_window)


def matched(found, truth, window=3):
    """Greedy one-to-one matching within +-window samples."""
    used = set()
    hits = 0
    for f in found:
        for j, g in enumerate(truth):
            if j not in used and abs(int(f) - int(g)) <= window:
                used.add(j)
                hits += 1
                break
    return hits


def check_invariants(s, l, t):
    assert s.words.shape == (l, t)
    assert s.spatial_ids.shape == s.temporal_ids.shape == s.pad_mask.shape == (l,)
    zero_patch = ~s.words.any(axis=1)
    np.testing.assert_array_equal(s.pad_mask, (s.spatial_ids == 0) & (s.temporal_ids == 0) & zero_patch)
    real = ~s.pad_mask
    assert np.all((s.spatial_ids[real] >= 1) & (s.spatial_ids[real] <= 12))
    assert np.all((s.temporal_ids[real] >= 1) & (s.temporal_ids[real] <= 10))


@pytest.mark.usefixtures("backend")
class TestDetect:
    def test_sixty_bpm(self):
        rec = synthesize_ecg(60)
        q = detect_qrs(rec)
        truth = rec.annotations["qrs_samples"]
        assert len(q) == 10 and matched(q.indices, truth) == 10

    def test_hundred_twenty_bpm(self):
        assert len(detect_qrs(synthesize_ecg(120))) == 20

    @pytest.mark.parametrize("bpm", [40, 60, 100, 150])
    def test_clean_rates(self, bpm):
        rec = synthesize_ecg(bpm)
        q = detect_qrs(rec).indices
        assert matched(q, rec.annotations["qrs_samples"]) == len(rec.annotations["qrs_samples"]) == len(q)

    def test_zero_record(self):
        rec = EcgRecord(np.zeros((12, 1000)), 100, synthesize_ecg(60).lead_names)
        assert len(detect_qrs(rec)) == 0

    def test_missing_lead_one(self):
        rec = synthesize_ecg(60)
        with pytest.raises(ConfigError):
            detect_qrs(rec.replace(samples=rec.samples[1:], lead_names=rec.lead_names[1:]))

    def test_refractory_and_order(self):
        q = detect_qrs(synthesize_ecg(150, morphology_params=MorphologyParams(noise_std=0.05), rng_seed=1)).indices
        assert np.all(np.diff(q) >= 20)

    @settings(max_examples=25)
    @given(st.integers(-40, 40), st.floats(45, 140))
    def test_shift_equivariance(self, s, bpm):
        rec = synthesize_ecg(bpm, duration_s=12)
        base = detect_qrs(rec).indices
        shifted = detect_qrs(rec.replace(samples=np.roll(rec.samples, s, axis=1))).indices
        # compare beats well inside both windows
        inner = base[(base + s > 150) & (base + s < 1050) & (base > 150) & (base < 1050)]
        for idx in inner:
            assert np.min(np.abs(shifted - (idx + s))) <= 2

    @settings(max_examples=25)
    @given(st.floats(35, 170), st.floats(0.1, 20.0))
    def test_amplitude_scaling(self, bpm, c):
        rec = synthesize_ecg(bpm)
        assert len(detect_qrs(rec.replace(samples=rec.samples * c))) == len(detect_qrs(rec))


class TestSegment:
    def lead(self, n=1000):
        return EcgRecord(np.arange(n, dtype=float)[None, :], 100, ("I",), "x")

    def test_single_beat_window(self):
        words = segment_words(self.lead(), QrsIndices(np.array([500]), 100), 96)
        np.testing.assert_array_equal(words[0][0].patch, np.arange(452, 548))

    def test_narrow_interval_padding(self):
        # beats 60 apart on both sides give a 60-sample interval around the middle one
        words = segment_words(self.lead(), QrsIndices(np.array([440, 500, 560]), 100), 96)
        p = words[0][1].patch
        assert np.all(p[:18] == 0) and np.all(p[-18:] == 0)
        np.testing.assert_array_equal(p[18:78], np.arange(470, 530))

    def test_word_count(self):
        rec = synthesize_ecg(60)
        words = segment_words(rec, detect_qrs(rec), 96)
        assert sum(len(w) for w in words) == 120

    def test_empty(self):
        with pytest.raises(EmptyTokenizationError):
            segment_words(self.lead(), QrsIndices(np.zeros(0, np.int64), 100), 96)


def fake_words(n_leads, n_words, t=4):
    return [[EcgWord(np.full(t, 1.0 + c), c, 100 * i + 50) for i in range(n_words)] for c in range(n_leads)]


class TestSentence:
    def test_padding(self):
        s = build_sentence(fake_words(12, 10), 256, TokenizerConfig(t=4))
        assert s.n_real == 120 and s.pad_mask.sum() == 136
        check_invariants(s, 256, 4)

    def test_truncation(self):
        s = build_sentence(fake_words(12, 25), 256, TokenizerConfig(t=4))
        assert s.n_real == 256
        # lead-major order: the last lead (index 11) lost words first
        assert s.spatial_ids[-1] == 11 and (s.spatial_ids == 12).sum() == 0

    def test_temporal_id(self):
        w = [[EcgWord(np.ones(4), 0, 250)]]
        assert build_sentence(w, 2, TokenizerConfig(t=4)).temporal_ids[0] == 3
        late = [[EcgWord(np.ones(4), 0, 1500)]]
        assert build_sentence(late, 2, TokenizerConfig(t=4)).temporal_ids[0] == 10

    def test_vectorised_matches_reference(self):
        rec = synthesize_ecg(70, rng_seed=2)
        cfg = TokenizerConfig(l=200)
        fast = tokenize(rec, cfg)
        ref = build_sentence(segment_words(rec, detect_qrs(rec, cfg), cfg.t), cfg.l, cfg)
        np.testing.assert_array_equal(fast.words, ref.words)
        np.testing.assert_array_equal(fast.spatial_ids, ref.spatial_ids)
        np.testing.assert_array_equal(fast.temporal_ids, ref.temporal_ids)


class TestFixedWindow:
    def test_counts(self):
        s = tokenize_fixed_window(synthesize_ecg(60), 96, 96, 256)
        assert s.n_real == 120
        s = tokenize_fixed_window(synthesize_ecg(60), 96, None, 120)
        assert s.n_real == 120 and not s.pad_mask.any()

    def test_short_record(self):
        with pytest.raises(EmptyTokenizationError):
            tokenize_fixed_window(synthesize_ecg(150, duration_s=0.9), 96, None, 256)

    def test_modes_differ(self):
        rec = synthesize_ecg(75)
        a = tokenize(rec, TokenizerConfig())
        b = tokenize(rec, TokenizerConfig(mode="fixed_window"))
        assert not np.array_equal(a.words, b.words)


def test_config_validation():
    for bad in (dict(t=0), dict(l=0), dict(band=(20, 5)), dict(band=(5, 60)), dict(mode="x"),
                dict(leads=("Q7",))):
        with pytest.raises(ConfigError):
            TokenizerConfig(**bad)


def test_lead_subset():
    cfg = lead_subset(TokenizerConfig(l=64), 3)
    s = tokenize(synthesize_ecg(60), cfg)
    assert sorted(set(s.spatial_ids[~s.pad_mask])) == [1, 2, 8]
    with pytest.raises(ConfigError):
        lead_subset(TokenizerConfig(), 5)


@settings(max_examples=30)
@given(st.floats(35, 180), st.floats(0.0, 0.08), st.floats(2.0, 14.0), st.integers(0, 10_000),
       st.sampled_from(["heartbeat", "fixed_window"]))
def test_sentence_shape_fuzz(bpm, noise, duration, seed, mode):
    rec = synthesize_ecg(bpm, duration_s=duration, rng_seed=seed,
                         morphology_params=MorphologyParams(noise_std=noise, rr_jitter=0.03))
    cfg = TokenizerConfig(l=128, mode=mode)
    try:
        s = tokenize(rec, cfg)
    except EmptyTokenizationError:
        return
    check_invariants(s, 128, 96)
    if mode == "heartbeat":
        assert s.n_real == min(128, 12 * s.qrs_count)

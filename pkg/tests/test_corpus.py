import numpy as np
import pytest

from emgse import corpus
from emgse.corpus import (
    CorpusConfig, MixSpec, make_manifest, mix_at_snr, synth_noise, synth_utterance,
)
from emgse.errors import ConfigError, InputError


def measured_snr_db(noisy, clean):
    noise = noisy - clean
    return 10.0 * np.log10(np.mean(clean**2) / np.mean(noise**2))


class TestSynthUtterance:
    def test_deterministic(self):
        a = synth_utterance(1234, 1.0)
        b = synth_utterance(1234, 1.0)
        assert np.array_equal(a.clean.samples, b.clean.samples)
        assert np.array_equal(a.emg.samples, b.emg.samples)
        assert np.array_equal(a.phonemes, b.phonemes)

    def test_rate_bookkeeping(self):
        u = synth_utterance(7, 1.0)
        assert u.clean.samples.shape == (16000,)
        assert u.emg.samples.shape == (1000, 8)
        assert u.phonemes.shape == (50,)
        assert u.duration == 1.0

    def test_bad_duration(self):
        with pytest.raises(InputError):
            synth_utterance(7, 1.013)

    def test_languages_disjoint(self):
        ua = synth_utterance(3, 4.0, language="A")
        ub = synth_utterance(3, 4.0, language="B")
        assert set(np.unique(ua.phonemes)) - {0} <= set(corpus.LANGUAGE_A)
        assert set(np.unique(ub.phonemes)) - {0} <= set(corpus.LANGUAGE_B)

    def test_emg_predicts_phonemes_above_chance(self):
        # Ridge regression from per-frame EMG channel energies to one-hot
        # labels, trained on the first 80% of frames of one long utterance.
        u = synth_utterance(99, 8.0)
        C = u.phonemes.size
        feats = (u.emg.samples.astype(np.float64) ** 2).reshape(C, 20, 8).mean(axis=1)
        feats = np.concatenate([feats, np.ones((C, 1))], axis=1)
        onehot = np.eye(corpus.PHONEME_COUNT)[u.phonemes]
        split = int(0.8 * C)
        Xtr, Xte = feats[:split], feats[split:]
        ytr = onehot[:split]
        w = np.linalg.solve(Xtr.T @ Xtr + 1e-3 * np.eye(9), Xtr.T @ ytr)
        pred = (Xte @ w).argmax(axis=1)
        acc = float(np.mean(pred == u.phonemes[split:]))
        counts = np.bincount(u.phonemes[split:], minlength=corpus.PHONEME_COUNT)
        majority = counts.max() / counts.sum()
        assert acc > max(majority, 1.0 / corpus.PHONEME_COUNT)


class TestSynthNoise:
    def test_white_autocorrelation(self):
        x = synth_noise(MixSpec("white", 0.0, 5), 16000).samples
        x = x - x.mean()
        denom = float(np.dot(x, x))
        for lag in (1, 2, 5, 10):
            rho = float(np.dot(x[:-lag], x[lag:])) / denom
            assert abs(rho) < 0.05

    def test_pink_slope(self):
        from scipy.signal import welch

        x = synth_noise(MixSpec("pink", 0.0, 6), 16000 * 8).samples
        f, p = welch(x, fs=16000, nperseg=4096)
        band = (f >= 100) & (f <= 4000)
        logf = np.log2(f[band])
        logp = 10.0 * np.log10(p[band])
        slope = np.polyfit(logf, logp, 1)[0]
        assert abs(slope - (-3.0)) < 1.0

    def test_unit_rms(self):
        for kind in corpus.NOISE_KINDS:
            x = synth_noise(MixSpec(kind, 0.0, 7), 16000).samples
            assert abs(np.sqrt(np.mean(x * x)) - 1.0) < 1e-6, kind

    def test_deterministic(self):
        a = synth_noise(MixSpec("street", 0.0, 8), 8000).samples
        b = synth_noise(MixSpec("street", 0.0, 8), 8000).samples
        assert np.array_equal(a, b)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            synth_noise(MixSpec("ocean", 0.0, 9), 100)


class TestMixAtSnr:
    def test_scale_closed_forms(self):
        rng = np.random.default_rng(10)
        c = rng.normal(size=8000)
        n = rng.normal(size=8000)
        n *= np.sqrt(np.mean(c**2) / np.mean(n**2))  # equal powers
        for snr, expect in ((0.0, 1.0), (10.0, 10 ** -0.5), (-10.0, 10 ** 0.5)):
            _, scale = mix_at_snr(c, n, snr)
            np.testing.assert_allclose(scale, expect, rtol=1e-12)

    def test_snr_exactness_sweep(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            c = rng.normal(size=4000) * rng.uniform(0.1, 3.0)
            n = rng.normal(size=4000) * rng.uniform(0.1, 3.0)
            snr = rng.uniform(-15, 15)
            noisy, _ = mix_at_snr(c, n, snr)
            assert abs(measured_snr_db(noisy.samples, c) - snr) < 0.01

    def test_silent_clean_rejected(self):
        with pytest.raises(InputError):
            mix_at_snr(np.zeros(100), np.ones(100), 0.0)

    def test_tiling_with_crossfade(self):
        rng = np.random.default_rng(12)
        short = rng.normal(size=3000)
        tiled = corpus.tile_noise(short, 10000)
        assert tiled.shape == (10000,)
        np.testing.assert_array_equal(tiled[:2200], short[:2200])
        noisy, _ = mix_at_snr(rng.normal(size=10000), short, 5.0)
        assert noisy.samples.shape == (10000,)


class TestManifest:
    def test_default_counts_and_grids(self):
        cfg = CorpusConfig()
        entries = make_manifest(cfg, 42)
        by_split = {}
        for e in entries:
            by_split.setdefault(e.split, []).append(e)
        assert len(by_split["train"]) == 64
        assert len(by_split["val"]) == 8
        assert len(by_split["test_matched"]) == 8 * 3 * 4
        assert len(by_split["test_mismatched"]) == 8 * 4 * 4

    def test_grid_completeness(self):
        cfg = CorpusConfig()
        entries = [e for e in make_manifest(cfg, 42) if e.split == "test_mismatched"]
        seen = {(e.utt_id, e.noise_kind, e.snr_db) for e in entries}
        assert len(seen) == len(entries)
        for uid in {e.utt_id for e in entries}:
            cells = {(e.noise_kind, e.snr_db) for e in entries if e.utt_id == uid}
            assert cells == {
                (k, s) for k in cfg.mismatched_kinds for s in cfg.mismatched_snrs
            }

    def test_mismatched_kinds_disjoint(self):
        cfg = CorpusConfig()
        entries = make_manifest(cfg, 42)
        for e in entries:
            if e.split == "test_mismatched":
                assert e.noise_kind not in cfg.train_kinds
            else:
                assert e.noise_kind in cfg.train_kinds

    def test_overlapping_kinds_rejected(self):
        with pytest.raises(ConfigError):
            CorpusConfig(train_kinds=("white",), mismatched_kinds=("white", "pink"))

    def test_deterministic_and_round_trip(self, tmp_path):
        cfg = CorpusConfig(n_train=4, n_val=2, n_test=2)
        a = make_manifest(cfg, 7)
        b = make_manifest(cfg, 7)
        assert a == b
        p = tmp_path / "manifest.tsv"
        corpus.save_manifest(p, a)
        assert corpus.load_manifest(p) == a


class TestEmg8:
    def test_round_trip(self, tmp_path):
        u = synth_utterance(55, 0.5)
        p = tmp_path / "x.emg8"
        corpus.write_emg8(p, u.emg)
        rec = corpus.read_emg8(p)
        assert np.array_equal(rec.samples, u.emg.samples)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.emg8"
        p.write_bytes(b"WAVE" + b"\x00" * 32)
        with pytest.raises(InputError):
            corpus.read_emg8(p)

    def test_truncated(self, tmp_path):
        u = synth_utterance(56, 0.5)
        p = tmp_path / "x.emg8"
        corpus.write_emg8(p, u.emg)
        raw = p.read_bytes()
        p.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(InputError):
            corpus.read_emg8(p)

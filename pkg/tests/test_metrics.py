import numpy as np
import pytest

from emgse import metrics
from emgse.corpus import MixSpec, mix_at_snr, synth_noise, synth_utterance
from emgse.errors import InputError, ShapeError
from emgse.metrics import MetricItem, aggregate_report, si_sdr, stoi


def speech(seed, dur=2.0):
    return synth_utterance(seed, dur).clean.samples


class TestStoi:
    def test_self_score(self):
        for seed in (0, 1, 2):
            x = speech(seed)
            assert stoi(x, x) >= 0.999

    def test_sign_flip_invariance(self):
        x = speech(3)
        assert stoi(x, -x) == stoi(x, x)

    def test_noise_lowers_score(self):
        x = speech(4)
        noisy, _ = mix_at_snr(x, synth_noise(MixSpec("white", 0, 11), x.size), -5.0)
        assert stoi(x, noisy.samples) < stoi(x, x) - 0.1

    def test_snr_monotonic_white_and_pink(self):
        for kind in ("white", "pink"):
            for seed in range(10):
                x = speech(100 + seed)
                noise = synth_noise(MixSpec(kind, 0, 1000 + seed), x.size)
                scores = []
                for snr in (-10.0, -5.0, 0.0, 5.0):
                    noisy, _ = mix_at_snr(x, noise, snr)
                    scores.append(stoi(x, noisy.samples))
                assert all(b > a for a, b in zip(scores, scores[1:])), (kind, seed, scores)

    def test_silent_clean_rejected(self):
        with pytest.raises(InputError):
            stoi(np.zeros(16000), np.random.default_rng(0).normal(size=16000))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            stoi(np.zeros(16000), np.zeros(8000))

    def test_range(self):
        x = speech(5)
        rng = np.random.default_rng(6)
        for degraded in (rng.normal(size=x.size), -x, 0.3 * x + rng.normal(size=x.size)):
            s = stoi(x, degraded)
            assert -1.0 <= s <= 1.0


class TestSiSdr:
    def test_scaled_clean_hits_cap(self):
        x = speech(7)
        assert si_sdr(x, 2.0 * x) == 100.0

    def test_orthogonal_equal_norm_is_zero_db(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=4000)
        x -= x.mean()
        n = rng.normal(size=4000)
        n -= n.mean()
        n -= (np.dot(n, x) / np.dot(x, x)) * x  # Gram-Schmidt
        n *= np.linalg.norm(x) / np.linalg.norm(n)
        assert abs(si_sdr(x, x + n)) < 1e-9

    def test_orthogonal_estimate_hits_floor(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=4000)
        x -= x.mean()
        n = rng.normal(size=4000)
        n -= n.mean()
        n -= (np.dot(n, x) / np.dot(x, x)) * x
        assert si_sdr(x, n) == -100.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=4000)
        e = x + 0.3 * rng.normal(size=4000)
        assert abs(si_sdr(x, e) - si_sdr(x, 5.0 * e)) < 1e-9

    def test_silent_clean(self):
        with pytest.raises(InputError):
            si_sdr(np.zeros(100), np.ones(100))


class TestMeasuredSnr:
    def test_recovers_mix_snr(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            c = rng.normal(size=4000)
            n = rng.normal(size=4000)
            snr = rng.uniform(-12, 12)
            noisy, _ = mix_at_snr(c, n, snr)
            assert abs(metrics.measured_snr_db(noisy.samples, c) - snr) < 0.01


class TestAggregate:
    def test_single_item(self):
        rows = aggregate_report([MetricItem("matched", "white", 0.0, "se", "STOI", 0.8)])
        detail = [r for r in rows if r.noise_kind == "white"]
        assert len(detail) == 1 and detail[0].mean == 0.8 and detail[0].count == 1

    def test_average_row_is_mean_of_per_snr_means(self):
        items = [
            MetricItem("matched", "white", snr, "se", "STOI", val)
            for snr, val in ((-10.0, 1.0), (-5.0, 2.0), (0.0, 3.0), (5.0, 4.0))
        ]
        rows = aggregate_report(items)
        avg = [r for r in rows if r.snr_db == "average"]
        assert len(avg) == 1 and avg[0].mean == 2.5 and avg[0].count == 4

    def test_deterministic_ordering(self):
        items = [
            MetricItem("matched", k, s, "se", "STOI", 0.5)
            for k in ("white", "engine") for s in (0.0, 5.0)
        ]
        r1 = aggregate_report(items)
        r2 = aggregate_report(list(reversed(items)))
        assert r1 == r2

    def test_csv_header_exact(self, tmp_path):
        p = tmp_path / "report.csv"
        rows = aggregate_report([MetricItem("matched", "white", 0.0, "se", "STOI", 0.8)])
        metrics.write_report_csv(p, rows)
        text = p.read_text(encoding="utf-8")
        assert text.splitlines()[0] == "condition,noise_kind,snr_db,system,metric,mean,count"
        assert "\r" not in text

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            aggregate_report([])

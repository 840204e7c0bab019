"""Objective evaluation: STOI, SI-SDR, and report aggregation.

STOI follows the original short-time objective intelligibility procedure:
10 kHz internal rate, 40 dB silent-frame removal keyed to the clean signal,
256-sample frames (hop 128) zero-padded to a 512-point FFT, 15 one-third-
octave bands from 150 Hz, 384 ms (30-frame) segments, -15 dB clipping, and
the mean of per-band per-segment correlations. SI-SDR stands in for PESQ as
the quality column; the report labels the substitution.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly

from .errors import InputError, ShapeError

_STOI_RATE = 10000
_FRAME = 256
_HOP = 128
_NFFT = 512
_N_BANDS = 15
_BAND_BASE_HZ = 150.0
_SEG = 30  # 30 frames * 128 hop = 384 ms at 10 kHz
_DYN_RANGE_DB = 40.0
_CLIP_DB = -15.0
_EPS = 1e-15


def _resample_to_10k(x):
    # 16 kHz -> 10 kHz is up 5 / down 8; kaiser beta 6 gives > 60 dB stopband.
    return resample_poly(x, 5, 8, window=("kaiser", 6.0))


def _frames(x, n, hop):
    if x.size < n:
        return np.zeros((0, n))
    return np.lib.stride_tricks.sliding_window_view(x, n)[::hop].copy()


def _remove_silent_frames(x, y):
    w = np.hanning(_FRAME + 2)[1:-1]
    xf = _frames(x, _FRAME, _HOP) * w
    yf = _frames(y, _FRAME, _HOP) * w
    if xf.shape[0] == 0:
        raise InputError("signal too short for STOI framing")
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    mask = energy > energy.max() - _DYN_RANGE_DB
    if not np.any(mask):
        raise InputError("no speech frames retained; clean signal is silent")
    xf, yf = xf[mask], yf[mask]
    n = xf.shape[0]
    out_len = (n - 1) * _HOP + _FRAME
    xs = np.zeros(out_len)
    ys = np.zeros(out_len)
    for i in range(n):
        xs[i * _HOP : i * _HOP + _FRAME] += xf[i]
        ys[i * _HOP : i * _HOP + _FRAME] += yf[i]
    return xs, ys


def _third_octave_matrix():
    freqs = np.fft.rfftfreq(_NFFT, d=1.0 / _STOI_RATE)
    centers = _BAND_BASE_HZ * (2.0 ** (np.arange(_N_BANDS) / 3.0))
    lo = centers / 2.0 ** (1.0 / 6.0)
    hi = centers * 2.0 ** (1.0 / 6.0)
    obm = np.zeros((_N_BANDS, freqs.size))
    for j in range(_N_BANDS):
        obm[j] = (freqs >= lo[j]) & (freqs < hi[j])
    return obm


def _band_envelopes(x):
    w = np.hanning(_FRAME + 2)[1:-1]
    frames = _frames(x, _FRAME, _HOP) * w
    X = np.fft.rfft(frames, n=_NFFT, axis=1)
    power = (X.real**2 + X.imag**2)
    return np.sqrt(power @ _third_octave_matrix().T)  # [T, bands]


def stoi(clean, degraded):
    cx = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    dx = np.asarray(getattr(degraded, "samples", degraded), dtype=np.float64)
    if cx.shape != dx.shape:
        raise ShapeError(f"length mismatch: {cx.shape} vs {dx.shape}")
    cx = _resample_to_10k(cx)
    dx = _resample_to_10k(dx)
    if not np.any(cx):
        raise InputError("no speech frames retained; clean signal is silent")
    cx, dx = _remove_silent_frames(cx, dx)
    X = _band_envelopes(cx)
    Y = _band_envelopes(dx)
    T = X.shape[0]
    if T < _SEG:
        raise InputError(f"need at least {_SEG} frames after silence removal, got {T}")

    c = 10.0 ** (_CLIP_DB / 20.0)
    scores = []
    for m in range(_SEG, T + 1):
        xs = X[m - _SEG : m]  # [30, bands]
        ys = Y[m - _SEG : m]
        alpha = np.sqrt((xs**2).sum(axis=0) / ((ys**2).sum(axis=0) + _EPS))
        yn = np.minimum(ys * alpha, xs * (1.0 + c))
        xc = xs - xs.mean(axis=0)
        yc = yn - yn.mean(axis=0)
        num = (xc * yc).sum(axis=0)
        den = np.linalg.norm(xc, axis=0) * np.linalg.norm(yc, axis=0) + _EPS
        scores.append(num / den)
    return float(np.mean(scores))


def si_sdr(clean, estimate):
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if x.shape != e.shape:
        raise ShapeError(f"length mismatch: {x.shape} vs {e.shape}")
    x = x - x.mean()
    e = e - e.mean()
    px = float(np.dot(x, x))
    if px <= 0.0:
        raise InputError("clean signal is silent; SI-SDR undefined")
    s = (np.dot(e, x) / px) * x
    err = e - s
    num = float(np.dot(s, s))
    den = float(np.dot(err, err))
    if den <= 0.0:
        return 100.0
    if num <= 0.0:
        return -100.0
    return float(np.clip(10.0 * np.log10(num / den), -100.0, 100.0))


def measured_snr_db(noisy, clean):
    """SNR implied by treating (noisy - clean) as the noise."""
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    y = np.asarray(getattr(noisy, "samples", noisy), dtype=np.float64)
    n = y - x
    pn = float(np.mean(n * n))
    px = float(np.mean(x * x))
    if px <= 0.0 or pn <= 0.0:
        raise InputError("SNR undefined for silent signal or exact equality")
    return 10.0 * np.log10(px / pn)


# -- aggregation ------------------------------------------------------------------

REPORT_HEADER = "condition,noise_kind,snr_db,system,metric,mean,count"


@dataclass(frozen=True)
class MetricItem:
    condition: str
    noise_kind: str
    snr_db: float
    system: str
    metric: str
    value: float


@dataclass(frozen=True)
class MetricRow:
    condition: str
    noise_kind: str
    snr_db: object  # float for detail rows, "average" for the summary row
    system: str
    metric: str
    mean: float
    count: int


def aggregate_report(items):
    """Detail means per (condition, kind, snr, system, metric), per-SNR rows
    collapsed over kinds, and an "average" row = mean of the per-SNR means."""
    if not items:
        raise InputError("no metric items to aggregate")
    detail = {}
    per_snr = {}
    for it in items:
        detail.setdefault(
            (it.condition, it.noise_kind, it.snr_db, it.system, it.metric), []
        ).append(it.value)
        per_snr.setdefault((it.condition, it.snr_db, it.system, it.metric), []).append(it.value)

    rows = []
    for key in sorted(detail):
        vals = detail[key]
        rows.append(MetricRow(key[0], key[1], key[2], key[3], key[4], float(np.mean(vals)), len(vals)))
    snr_means = {}
    for key in sorted(per_snr):
        vals = per_snr[key]
        cond, snr, system, metric = key
        rows.append(MetricRow(cond, "all", snr, system, metric, float(np.mean(vals)), len(vals)))
        snr_means.setdefault((cond, system, metric), []).append(float(np.mean(vals)))
    for key in sorted(snr_means):
        cond, system, metric = key
        means = snr_means[key]
        total = sum(len(per_snr[k]) for k in per_snr if (k[0], k[2], k[3]) == key)
        rows.append(MetricRow(cond, "all", "average", system, metric, float(np.mean(means)), total))
    return rows


def write_report_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER.split(","))
        for r in rows:
            snr = r.snr_db if isinstance(r.snr_db, str) else f"{r.snr_db:g}"
            writer.writerow([r.condition, r.noise_kind, snr, r.system, r.metric,
                             f"{r.mean:.6f}", r.count])

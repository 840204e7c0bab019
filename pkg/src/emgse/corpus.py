"""Synthetic paired (speech, EMG, phoneme) corpus, noise bank, SNR-exact
mixing, and split manifests.

Everything is a deterministic function of integer seeds derived with
stable_seed (sha256, not Python's salted hash), so any item can be
regenerated bit-exactly from the manifest alone. Speech is a per-phoneme
harmonic source shaped by formant-style resonators; EMG is phoneme-keyed
envelope templates (a fixed 8 x |P| gain map) modulating band-limited noise.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, lfilter

from .dsp import AUDIO_RATE, Waveform
from .errors import ConfigError, InputError, ShapeError

EMG_RATE = 1000
FRAME_RATE = 50
PHONEME_COUNT = 16
SILENCE = 0
LANGUAGE_A = tuple(range(1, 9))
LANGUAGE_B = tuple(range(9, 16))

# Articulatory map shared by the whole corpus (one synthetic "speaker").
_GAIN_SEED = 0xE36


def stable_seed(*parts):
    """Order-sensitive 64-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class EmgRecording:
    samples: np.ndarray  # [T_emg, 8] float32
    rate: int = EMG_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[1] != 8:
            raise ShapeError(f"EMG must be [T, 8]; got {self.samples.shape}")
        if self.rate != EMG_RATE:
            raise ConfigError(f"EMG rate must be {EMG_RATE} Hz; got {self.rate}")


@dataclass
class Utterance:
    id: str
    clean: Waveform
    emg: EmgRecording
    phonemes: np.ndarray  # [C] int labels
    duration: float


@dataclass(frozen=True)
class MixSpec:
    noise_kind: str
    snr_db: float
    seed: int


# -- phoneme track and source synthesis -----------------------------------------


def _phoneme_f0(p):
    return 85.0 + 12.0 * p


def _phoneme_formant(p):
    return 300.0 + 145.0 * p, 120.0 + 6.0 * p  # center Hz, bandwidth Hz


def _markov_labels(rng, C, inventory):
    labels = np.empty(C, dtype=np.int64)
    state = SILENCE
    choices = (SILENCE,) + tuple(inventory)
    for t in range(C):
        labels[t] = state
        if rng.random() >= 0.9:
            others = [c for c in choices if c != state]
            state = others[rng.integers(len(others))]
    return labels


def _upsample_hold(values, factor):
    return np.repeat(values, factor)


def _smooth(x, width):
    if width <= 1:
        return x
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="same")


def _resonator(fc, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2.0 * np.pi * fc / fs
    b = np.array([1.0 - r])
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return b, a


def synth_utterance(seed, duration, language="A", uid=None):
    """Deterministic synthetic utterance; duration must be a 0.02 s multiple."""
    C = duration * FRAME_RATE
    if abs(C - round(C)) > 1e-9:
        raise InputError(f"duration {duration} s is not a multiple of 0.02 s")
    C = int(round(C))
    if C < 1:
        raise InputError("duration must be at least one 20 ms frame")
    inventory = LANGUAGE_A if language == "A" else LANGUAGE_B
    rng = np.random.default_rng(seed)

    labels = _markov_labels(rng, C, inventory)
    n_audio = C * (AUDIO_RATE // FRAME_RATE)
    n_emg = C * (EMG_RATE // FRAME_RATE)

    # Voiced source: continuous-phase harmonic stack, phoneme-keyed f0.
    f0_frame = np.where(labels > 0, _phoneme_f0(labels), 0.0)
    f0_frame = f0_frame * rng.uniform(0.95, 1.05)
    f0 = _upsample_hold(f0_frame, AUDIO_RATE // FRAME_RATE)
    phase = 2.0 * np.pi * np.cumsum(f0) / AUDIO_RATE
    source = np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
    source += 0.05 * rng.normal(size=n_audio)

    # Per-phoneme resonant shaping, blended with smooth activity masks.
    env = _smooth(_upsample_hold((labels > 0).astype(np.float64), AUDIO_RATE // FRAME_RATE), 161)
    speech = np.zeros(n_audio)
    for p in np.unique(labels):
        if p == SILENCE:
            continue
        mask = _smooth(_upsample_hold((labels == p).astype(np.float64), AUDIO_RATE // FRAME_RATE), 161)
        b, a = _resonator(*_phoneme_formant(p), AUDIO_RATE)
        speech += lfilter(b, a, source) * mask
    speech *= env
    peak = np.abs(speech).max()
    if peak > 0:
        speech *= 0.5 / peak

    # EMG: fixed gain map [8, |P|] drives channel envelopes over 20-450 Hz noise.
    gains = np.random.default_rng(_GAIN_SEED).uniform(0.2, 1.0, size=(8, PHONEME_COUNT))
    drive_frame = gains[:, labels]  # [8, C]
    drive = np.repeat(drive_frame, EMG_RATE // FRAME_RATE, axis=1)
    drive = np.stack([_smooth(ch, 21) for ch in drive])
    silence_mask = _smooth(_upsample_hold((labels > 0).astype(np.float64), EMG_RATE // FRAME_RATE), 21)
    b, a = butter(4, [20.0, 450.0], btype="band", fs=EMG_RATE)
    carrier = lfilter(b, a, rng.normal(size=(8, n_emg)), axis=1)
    emg = drive * silence_mask[None, :] * carrier + 0.02 * rng.normal(size=(8, n_emg))

    return Utterance(
        id=uid or f"utt-{seed:016x}",
        clean=Waveform(speech, AUDIO_RATE),
        emg=EmgRecording(emg.T.astype(np.float32)),
        phonemes=labels,
        duration=C / FRAME_RATE,
    )


# -- noise bank ------------------------------------------------------------------

NOISE_KINDS = ("white", "pink", "car", "engine", "street", "babble_a", "babble_b")


def _pink(rng, n):
    X = np.fft.rfft(rng.normal(size=n))
    k = np.arange(X.size, dtype=np.float64)
    k[0] = 1.0
    X /= np.sqrt(k)
    X[0] = 0.0
    return np.fft.irfft(X, n=n)


def _lowpass(x, fc, fs, order=4):
    b, a = butter(order, fc, btype="low", fs=fs)
    return lfilter(b, a, x)


def _bandpass(x, lo, hi, fs, order=4):
    b, a = butter(order, [lo, hi], btype="band", fs=fs)
    return lfilter(b, a, x)


def _babble(rng, n, language):
    total = np.zeros(n)
    dur = (n // AUDIO_RATE + 1) * 1.0
    dur = np.ceil(dur / 0.02) * 0.02
    for v in range(6):
        u = synth_utterance(int(rng.integers(2**63)), dur, language=language)
        total += u.clean.samples[:n]
    return total


def synth_noise(spec, length):
    """Unit-RMS noise of the requested kind and length, seeded by spec.seed."""
    if length < 1:
        raise InputError("noise length must be >= 1 sample")
    if spec.noise_kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind '{spec.noise_kind}' (known: {NOISE_KINDS})")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(length) / AUDIO_RATE
    kind = spec.noise_kind
    if kind == "white":
        x = rng.normal(size=length)
    elif kind == "pink":
        x = _pink(rng, length)
    elif kind == "car":
        rumble = _lowpass(rng.normal(size=length), 120.0, AUDIO_RATE)
        hum = 0.6 * np.sin(2 * np.pi * 30.0 * t + rng.uniform(0, 2 * np.pi))
        am = 1.0 + 0.3 * np.sin(2 * np.pi * 0.4 * t + rng.uniform(0, 2 * np.pi))
        x = (rumble + hum) * am
    elif kind == "engine":
        fb = rng.uniform(70.0, 95.0)
        x = np.zeros(length)
        for k in range(1, 7):
            x += np.sin(2 * np.pi * k * fb * t + rng.uniform(0, 2 * np.pi)) / k
        x *= 1.0 + 0.5 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
        x += 0.2 * _lowpass(rng.normal(size=length), 400.0, AUDIO_RATE)
    elif kind == "street":
        bursts = np.zeros(length)
        n_bursts = max(1, length // 4000)
        for _ in range(n_bursts):
            start = rng.integers(0, length)
            width = int(rng.uniform(0.05, 0.4) * AUDIO_RATE)
            stop = min(length, start + width)
            bursts[start:stop] += rng.uniform(0.3, 1.0)
        x = _bandpass(rng.normal(size=length), 200.0, 2000.0, AUDIO_RATE) * (0.3 + _smooth(bursts, 801))
    elif kind == "babble_a":
        x = _babble(rng, length, "A")
    else:  # babble_b
        x = _babble(rng, length, "B")
    rms = np.sqrt(np.mean(x * x))
    if rms <= 0:
        raise InputError("degenerate all-zero noise realization")
    return Waveform(x / rms, AUDIO_RATE)


def tile_noise(noise, length, crossfade_s=0.05):
    """Loop noise to `length` samples with a crossfade at each seam."""
    x = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    if x.size >= length:
        return x[:length].copy()
    fade = min(int(crossfade_s * AUDIO_RATE), x.size // 2)
    ramp = np.linspace(0.0, 1.0, fade) if fade else np.zeros(0)
    out = x.copy()
    while out.size < length:
        head = x.copy()
        if fade:
            mixed = out[-fade:] * (1.0 - ramp) + head[:fade] * ramp
            out = np.concatenate([out[:-fade], mixed, head[fade:]])
        else:
            out = np.concatenate([out, head])
    return out[:length]


def mix_at_snr(clean, noise, snr_db):
    """Mix so that 10*log10(P_clean / P_scaled_noise) equals snr_db exactly."""
    c = clean.samples if isinstance(clean, Waveform) else np.asarray(clean, dtype=np.float64)
    n = noise.samples if isinstance(noise, Waveform) else np.asarray(noise, dtype=np.float64)
    if not np.isfinite(snr_db):
        raise InputError("snr_db must be finite")
    if n.size != c.size:
        n = tile_noise(Waveform(n), c.size)
    p_clean = float(np.mean(c * c))
    p_noise = float(np.mean(n * n))
    if p_clean <= 0.0:
        raise InputError("clean signal is silent; SNR undefined")
    if p_noise <= 0.0:
        raise InputError("noise signal is silent; SNR undefined")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(c + scale * n, AUDIO_RATE), float(scale)


# -- splits and manifest ----------------------------------------------------------


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 64
    n_val: int = 8
    n_test: int = 8
    base_duration: float = 2.0
    train_kinds: tuple = ("white", "engine", "babble_a")
    mismatched_kinds: tuple = ("pink", "street", "babble_b", "car")
    train_snrs: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0)
    matched_snrs: tuple = (-10.0, -5.0, 0.0, 5.0)
    mismatched_snrs: tuple = (-11.0, -6.0, -1.0, 4.0)

    def __post_init__(self):
        overlap = set(self.train_kinds) & set(self.mismatched_kinds)
        if overlap:
            raise ConfigError(f"train and mismatched noise kinds overlap: {sorted(overlap)}")
        for k in self.train_kinds + self.mismatched_kinds:
            if k not in NOISE_KINDS:
                raise ConfigError(f"unknown noise kind '{k}'")


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    split: str  # train | val | test_matched | test_mismatched
    noise_kind: str
    snr_db: float
    seed: int


def utterance_duration(master_seed, utt_id, cfg):
    rng = np.random.default_rng(stable_seed(master_seed, "dur", utt_id))
    return cfg.base_duration + int(rng.integers(-25, 26)) * 0.02


def utterance_from_id(master_seed, utt_id, cfg):
    return synth_utterance(
        stable_seed(master_seed, "utt", utt_id),
        utterance_duration(master_seed, utt_id, cfg),
        language="A",
        uid=utt_id,
    )


def make_manifest(cfg, master_seed):
    """Deterministic split manifest; mixes identified by per-row seeds."""
    rng = np.random.default_rng(stable_seed(master_seed, "manifest"))
    entries = []

    def mix_seed(uid, kind, snr):
        return stable_seed(master_seed, "mix", uid, kind, snr)

    for i in range(cfg.n_train):
        uid = f"tr{i:04d}"
        kind = cfg.train_kinds[rng.integers(len(cfg.train_kinds))]
        snr = cfg.train_snrs[rng.integers(len(cfg.train_snrs))]
        entries.append(ManifestEntry(uid, "train", kind, float(snr), mix_seed(uid, kind, snr)))
    for i in range(cfg.n_val):
        uid = f"va{i:04d}"
        kind = cfg.train_kinds[rng.integers(len(cfg.train_kinds))]
        snr = cfg.train_snrs[rng.integers(len(cfg.train_snrs))]
        entries.append(ManifestEntry(uid, "val", kind, float(snr), mix_seed(uid, kind, snr)))
    for i in range(cfg.n_test):
        uid = f"te{i:04d}"
        for kind in cfg.train_kinds:
            for snr in cfg.matched_snrs:
                entries.append(
                    ManifestEntry(uid, "test_matched", kind, float(snr), mix_seed(uid, kind, snr))
                )
        for kind in cfg.mismatched_kinds:
            for snr in cfg.mismatched_snrs:
                entries.append(
                    ManifestEntry(uid, "test_mismatched", kind, float(snr), mix_seed(uid, kind, snr))
                )
    return entries


def save_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# id\tsplit\tnoise_kind\tsnr_db\tseed\n")
        for e in entries:
            f.write(f"{e.utt_id}\t{e.split}\t{e.noise_kind}\t{e.snr_db:g}\t{e.seed}\n")


def load_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise InputError(f"malformed manifest line: {line!r}")
            entries.append(
                ManifestEntry(parts[0], parts[1], parts[2], float(parts[3]), int(parts[4]))
            )
    return entries


def realize_mix(master_seed, entry, cfg):
    """Utterance plus its noisy mixture for one manifest row."""
    utt = utterance_from_id(master_seed, entry.utt_id, cfg)
    noise = synth_noise(
        MixSpec(entry.noise_kind, entry.snr_db, entry.seed), utt.clean.samples.size
    )
    noisy, scale = mix_at_snr(utt.clean, noise, entry.snr_db)
    return utt, noisy, scale


# -- EMG8 container ---------------------------------------------------------------

_EMG_MAGIC = b"EMG8"


def write_emg8(path, rec):
    samples = np.ascontiguousarray(rec.samples, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_EMG_MAGIC)
        f.write(np.array(8, dtype="<u4").tobytes())
        f.write(np.array(EMG_RATE, dtype="<u4").tobytes())
        f.write(np.array(samples.shape[0], dtype="<u8").tobytes())
        f.write(samples.tobytes())


def read_emg8(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _EMG_MAGIC:
            raise InputError(f"not an EMG8 file (magic {magic!r})")
        channels = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        rate = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        count = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        if channels != 8:
            raise InputError(f"EMG8 channel count must be 8, got {channels}")
        if rate != EMG_RATE:
            raise InputError(f"EMG8 rate must be {EMG_RATE}, got {rate}")
        data = np.frombuffer(f.read(count * channels * 4), dtype="<f4")
        if data.size != count * channels:
            raise InputError("EMG8 payload truncated")
    return EmgRecording(data.reshape(count, channels).copy())

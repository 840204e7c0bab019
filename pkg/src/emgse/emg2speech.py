"""Stage 1: EMG -> speech.

An 8-channel 1 kHz EMG stream is downsampled 20x by a strided conv stack,
contextualized by a small transformer encoder, and read out by two heads:
soft speech units (regression) and frame phonemes (classification). A
Pre-Net + autoregressive LSTM decoder maps units to log-mel frames, and
Griffin-Lim turns those into audio. Unit targets come from a fixed
orthonormal projection of the standardized log-mel of the paired clean
speech, so the whole stage trains without any external teacher model.
"""

import warnings

import numpy as np

from . import dsp
from .autodiff import Tensor, as_tensor, ops, nn
from .corpus import EmgRecording
from .errors import ConfigError, ContractError, ShapeError

D_UNIT = 64
N_PHONEMES = 16
N_MELS = 80

# Fixed affine applied to log-mel before the unit projection, so unit targets
# are O(1) regardless of the log floor. Constants are part of the format.
UNIT_MEAN = -11.5
UNIT_SCALE = 8.0


def sinusoidal_positions(length, dim):
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang)
    return pe


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model, n_heads, rng):
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model, rng)
        self.k = nn.Linear(d_model, d_model, rng)
        self.v = nn.Linear(d_model, d_model, rng)
        self.out = nn.Linear(d_model, d_model, rng)

    def forward(self, x):
        B, C, d = x.shape
        h, dh = self.n_heads, self.d_head

        def split(t):
            return ops.transpose(ops.reshape(t, (B, C, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ops.matmul(ops.softmax(scores, axis=-1), v)  # [B, h, C, dh]
        att = ops.reshape(ops.transpose(att, (0, 2, 1, 3)), (B, C, d))
        return self.out(att)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model, n_heads, d_ff, rng):
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads, rng)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff, rng)
        self.ff2 = nn.Linear(d_ff, d_model, rng)

    def forward(self, x):
        x = ops.add(x, self.attn(self.norm1(x)))
        return ops.add(x, self.ff2(ops.relu(self.ff1(self.norm2(x)))))


class EmgEncoder(nn.Module):
    """[B, T_emg, 8] at 1 kHz -> units [B, C, D_unit] and logits [B, C, |P|]."""

    def __init__(self, rng, d_model=128, n_layers=2, n_heads=4, d_ff=512):
        self.d_model = d_model
        self.conv1 = nn.Conv1d(8, 32, 9, rng, stride=2, padding=4)
        self.conv2 = nn.Conv1d(32, 64, 9, rng, stride=2, padding=4)
        self.conv3 = nn.Conv1d(64, d_model, 11, rng, stride=5, padding=5)
        self.layers = [TransformerLayer(d_model, n_heads, d_ff, rng) for _ in range(n_layers)]
        self.final_norm = nn.LayerNorm(d_model)
        self.unit_head = nn.Linear(d_model, D_UNIT, rng)
        self.phoneme_head = nn.Linear(d_model, N_PHONEMES, rng)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[2] != 8:
            raise ShapeError(f"expected [B, T_emg, 8]; got {x.shape}")
        if x.shape[1] % 20:
            raise ShapeError(f"T_emg={x.shape[1]} is not a multiple of 20")
        h = ops.transpose(x, (0, 2, 1))  # [B, 8, T]
        h = ops.silu(self.conv1(h))
        h = ops.silu(self.conv2(h))
        h = ops.silu(self.conv3(h))      # [B, d_model, C]
        h = ops.transpose(h, (0, 2, 1))  # [B, C, d_model]
        C = h.shape[1]
        h = ops.add(h, Tensor(sinusoidal_positions(C, self.d_model)))
        for layer in self.layers:
            h = layer(h)
        h = self.final_norm(h)
        return self.unit_head(h), self.phoneme_head(h)


def prepare_emg(rec, strict=False):
    """EmgRecording -> [1, T, 8] float array with the 20-multiple trim policy."""
    samples = rec.samples if isinstance(rec, EmgRecording) else np.asarray(rec)
    extra = samples.shape[0] % 20
    if extra:
        if strict:
            raise ShapeError(f"EMG length {samples.shape[0]} is not a multiple of 20")
        warnings.warn(f"trimming {extra} trailing EMG samples to a 20-multiple")
        samples = samples[: samples.shape[0] - extra]
    return samples.astype(np.float64)[None, :, :]


def emg_encoder_forward(encoder, rec, strict=False):
    units, logits = encoder(Tensor(prepare_emg(rec, strict=strict)))
    return units, logits


# -- losses ------------------------------------------------------------------


def loss_su(pred, target):
    """Mean over frames of the (unsquared) Euclidean norm of the difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ContractError(f"unit shapes differ: {pred.shape} vs {target.shape}")
    diff = ops.sub(pred, target)
    norms = ops.sqrt(ops.sum_(ops.mul(diff, diff), axis=-1))
    return ops.mean(norms)


def loss_phoneme(logits, targets):
    """Mean negative log-likelihood of the target phoneme per frame."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ContractError(f"target shape {targets.shape} does not match logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= n_classes:
        raise ContractError(f"target labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes)[targets]
    picked = ops.sum_(ops.mul(ops.log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1)
    return ops.neg(ops.mean(picked))


def loss_total(l_su, l_p, lambda_su=0.5, lambda_p=0.5):
    if lambda_su < 0 or lambda_p < 0:
        raise ConfigError("loss weights must be nonnegative")
    return ops.add(ops.mul(as_tensor(l_su), lambda_su), ops.mul(as_tensor(l_p), lambda_p))


# -- pseudo targets ------------------------------------------------------------


def unit_projection(seed):
    """Fixed [80, D_unit] matrix with orthonormal columns, seeded."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(N_MELS, D_UNIT))
    q, r = np.linalg.qr(m)
    return q * np.sign(np.diag(r))[None, :]


def pseudo_unit_targets(clean, seed):
    """[C, D_unit] targets: standardized log-mel through the fixed projection."""
    standardized = standardize_logmel(dsp.mel_spectrogram(clean))
    return standardized @ unit_projection(seed)


# -- acoustic decoder -----------------------------------------------------------


class AcousticDecoder(nn.Module):
    """Pre-Net + autoregressive LSTM cell + linear projection to log-mel."""

    def __init__(self, rng, d_unit=D_UNIT, n_mels=N_MELS, d_hidden=128):
        self.d_unit, self.n_mels, self.d_hidden = d_unit, n_mels, d_hidden
        self.pre1 = nn.Linear(d_unit, d_hidden, rng)
        self.pre2 = nn.Linear(d_hidden, d_hidden, rng)
        self.cell = nn.LstmCell(d_hidden + n_mels, d_hidden, rng)
        self.proj = nn.Linear(d_hidden, n_mels, rng)

    def forward(self, units, teacher=None):
        return acoustic_decode(self, units, teacher=teacher)


def acoustic_decode(dec, units, teacher=None):
    """units [B, C, d_unit] -> log-mel [B, C, n_mels].

    teacher given: each step is conditioned on the previous target frame
    (teacher forcing). teacher None: conditioned on its own previous output.
    """
    units = as_tensor(units)
    if units.ndim != 3 or units.shape[2] != dec.d_unit:
        raise ShapeError(f"expected [B, C, {dec.d_unit}]; got {units.shape}")
    B, C, _ = units.shape
    if C == 0:
        return Tensor(np.zeros((B, 0, dec.n_mels)))
    if teacher is not None:
        teacher = as_tensor(teacher)
        if teacher.shape != (B, C, dec.n_mels):
            raise ShapeError(f"teacher must be [B, {C}, {dec.n_mels}]; got {teacher.shape}")

    pre = ops.relu(dec.pre2(ops.relu(dec.pre1(units))))  # [B, C, d_hidden]
    h = Tensor(np.zeros((B, dec.d_hidden)))
    c = Tensor(np.zeros((B, dec.d_hidden)))
    prev = Tensor(np.zeros((B, dec.n_mels)))
    frames = []
    for t in range(C):
        step = ops.reshape(ops.narrow(pre, 1, t, 1), (B, dec.d_hidden))
        h, c = dec.cell(ops.concat([step, prev], axis=1), h, c)
        frame = dec.proj(h)
        frames.append(ops.reshape(frame, (B, 1, dec.n_mels)))
        if teacher is not None:
            prev = ops.reshape(ops.narrow(teacher, 1, t, 1), (B, dec.n_mels))
        else:
            prev = frame
    return ops.concat(frames, axis=1)


def standardize_logmel(logmel):
    return (np.asarray(logmel) - UNIT_MEAN) / UNIT_SCALE


def emg_to_speech(encoder, decoder, rec, mel_cfg=None, iterations=60):
    """Full stage-1 chain on one recording; peak-normalized 16 kHz output.

    The decoder is trained against standardized log-mel frames, so its output
    is mapped back through the fixed affine before phase retrieval.
    """
    from .autodiff import no_grad

    mel_cfg = mel_cfg or dsp.MelConfig()
    with no_grad():
        units, _ = emg_encoder_forward(encoder, rec)
        standardized = acoustic_decode(decoder, units).numpy()[0]
    logmel = standardized * UNIT_SCALE + UNIT_MEAN
    wave = dsp.griffin_lim(logmel, mel_cfg, iterations=iterations)
    peak = np.abs(wave).max()
    if peak > 1.0:
        wave = wave / peak
    return dsp.Waveform(wave, dsp.AUDIO_RATE)

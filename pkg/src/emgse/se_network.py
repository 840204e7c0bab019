"""Stage 2: dual-input speech enhancement in the compressed STFT domain.

Noisy speech and the stage-1 reconstruction are each analyzed into a
[compressed magnitude, phase] pair, encoded by separate dense encoders,
fused by a small fully connected cross module, refined by a stack of
time-frequency Mamba blocks, and decoded into a bounded magnitude mask
plus real/imaginary components that supply the enhanced phase. With
``multimodal=False`` the EMG branch and cross module do not exist and the
network reduces to the single-input baseline.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .autodiff import Tensor, as_tensor, no_grad, ops, nn
from .errors import ConfigError, ContractError, InputError, NumericError, ShapeError
from .ssm import TfMambaBlock

_DILATIONS = (1, 2, 4, 8)


@dataclass
class SeConfig:
    num_tf_blocks: int = 4
    channels: int = 16
    multimodal: bool = True
    stft: dsp.StftConfig = field(default_factory=dsp.StftConfig)
    lambda_time: float = 0.2
    lambda_mag: float = 0.9
    lambda_complex: float = 0.1
    lambda_phase: float = 0.3
    expansion: int = 2
    state_dim: int = 16
    conv_width: int = 4

    def __post_init__(self):
        if self.num_tf_blocks < 1:
            raise ConfigError("num_tf_blocks must be >= 1")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        for name in ("lambda_time", "lambda_mag", "lambda_complex", "lambda_phase"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @property
    def weights(self):
        return (self.lambda_time, self.lambda_mag, self.lambda_complex, self.lambda_phase)


def stack_spectral_input(spec):
    """Spectrogram -> [2, T, F]: compressed magnitude over phase."""
    return np.stack([spec.compressed_mag, spec.phase], axis=0)


class DenseBlock(nn.Module):
    """Four dilated 3x3 convs, dilation rising along T, dense concatenation."""

    def __init__(self, channels, rng):
        self.convs = []
        self.norms = []
        for i, d in enumerate(_DILATIONS):
            self.convs.append(
                nn.Conv2d(channels * (i + 1), channels, (3, 3), rng,
                          dilation=(d, 1), padding=(d, 1))
            )
            self.norms.append(nn.ChannelLayerNorm(channels))

    def forward(self, x):
        cat, y = x, x
        for conv, norm in zip(self.convs, self.norms):
            y = ops.silu(norm(conv(cat)))
            cat = ops.concat([cat, y], axis=1)
        return y


class DenseEncoder(nn.Module):
    """[B, 2, T, F] -> [B, C, T, (F-1)/2]; F must be odd so decoding inverts exactly."""

    def __init__(self, channels, rng):
        self.entry = nn.Conv2d(2, channels, (1, 1), rng)
        self.entry_norm = nn.ChannelLayerNorm(channels)
        self.block = DenseBlock(channels, rng)
        self.exit = nn.Conv2d(channels, channels, (1, 3), rng, stride=(1, 2))
        self.exit_norm = nn.ChannelLayerNorm(channels)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 2:
            raise ShapeError(f"expected [B, 2, T, F]; got {x.shape}")
        if x.shape[3] % 2 == 0 or x.shape[3] < 3:
            raise ShapeError(f"frequency extent {x.shape[3]} must be odd and >= 3")
        h = ops.silu(self.entry_norm(self.entry(x)))
        h = self.block(h)
        return ops.silu(self.exit_norm(self.exit(h)))


class CrossFuse(nn.Module):
    """Per-position fusion: concat channels, 2C -> 2C -> C, residual on branch a."""

    def __init__(self, channels, rng, residual=True):
        self.fc1 = nn.Linear(2 * channels, 2 * channels, rng)
        self.fc2 = nn.Linear(2 * channels, channels, rng)
        self.residual = residual

    def forward(self, feat_ac, feat_emg):
        if feat_ac.shape != feat_emg.shape:
            raise ShapeError(f"feature shapes differ: {feat_ac.shape} vs {feat_emg.shape}")
        u = ops.concat([feat_ac, feat_emg], axis=1)          # [B, 2C, T, F']
        u = ops.transpose(u, (0, 2, 3, 1))                   # [B, T, F', 2C]
        v = self.fc2(ops.relu(self.fc1(u)))
        v = ops.transpose(v, (0, 3, 1, 2))                   # [B, C, T, F']
        return ops.add(feat_ac, v) if self.residual else v


class MaskDecoder(nn.Module):
    """[B, C, T, F'] -> bounded mask [B, 1, T, 2F'+1] in (0, 2)."""

    def __init__(self, channels, rng):
        self.block = DenseBlock(channels, rng)
        self.up = nn.ConvTranspose2d(channels, channels, (1, 3), rng, stride=(1, 2))
        self.up_norm = nn.ChannelLayerNorm(channels)
        self.out = nn.Conv2d(channels, 1, (1, 1), rng)

    def forward(self, feat):
        h = self.block(feat)
        h = ops.silu(self.up_norm(self.up(h)))
        return ops.mul(ops.sigmoid(self.out(h)), 2.0)


class ComplexDecoder(nn.Module):
    """[B, C, T, F'] -> unbounded (real, imag), each [B, 1, T, 2F'+1]."""

    def __init__(self, channels, rng):
        self.block = DenseBlock(channels, rng)
        self.up = nn.ConvTranspose2d(channels, channels, (1, 3), rng, stride=(1, 2))
        self.up_norm = nn.ChannelLayerNorm(channels)
        self.out = nn.Conv2d(channels, 2, (1, 1), rng)

    def forward(self, feat):
        h = self.block(feat)
        h = ops.silu(self.up_norm(self.up(h)))
        ri = self.out(h)
        return ops.narrow(ri, 1, 0, 1), ops.narrow(ri, 1, 1, 1)


class SeNetwork(nn.Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        C = cfg.channels
        kw = dict(expansion=cfg.expansion, state_dim=cfg.state_dim, conv_width=cfg.conv_width)
        self.enc_ac = DenseEncoder(C, rng)
        if cfg.multimodal:
            self.enc_emg = DenseEncoder(C, rng)
            self.cross = CrossFuse(C, rng)
        self.blocks = [TfMambaBlock(C, rng, **kw) for _ in range(cfg.num_tf_blocks)]
        self.mask_dec = MaskDecoder(C, rng)
        self.complex_dec = ComplexDecoder(C, rng)

    def forward(self, x_ac, x_emg=None):
        feat = self.enc_ac(x_ac)
        if self.cfg.multimodal:
            if x_emg is None:
                raise ContractError("multimodal network requires the EMG-branch input")
            feat = self.cross(feat, self.enc_emg(x_emg))
        for block in self.blocks:
            feat = block(feat)
        mask = self.mask_dec(feat)
        real, imag = self.complex_dec(feat)
        return mask, real, imag


def enhance_spectra(net, noisy_cmag, noisy_phase, emg_cmag=None, emg_phase=None):
    """Batched spectral enhancement.

    noisy_cmag/noisy_phase: [B, T, F] arrays. Returns (enhanced compressed
    magnitude, enhanced phase) as [B, T, F] tensors on the autodiff tape.
    """
    noisy_cmag = np.asarray(noisy_cmag)
    x_ac = Tensor(np.stack([noisy_cmag, np.asarray(noisy_phase)], axis=1))
    x_emg = None
    if net.cfg.multimodal:
        if emg_cmag is None or emg_phase is None:
            raise ContractError("multimodal network requires the EMG-branch input")
        x_emg = Tensor(np.stack([np.asarray(emg_cmag), np.asarray(emg_phase)], axis=1))
    mask, real, imag = net(x_ac, x_emg)
    B, _, T, F = mask.shape
    mask = ops.reshape(mask, (B, T, F))
    enh_cmag = ops.mul(mask, Tensor(noisy_cmag))
    enh_phase = ops.atan2(ops.reshape(imag, (B, T, F)), ops.reshape(real, (B, T, F)))
    return enh_cmag, enh_phase


def reconstruct_waveform(cmag, phase, stft_cfg, length):
    """Differentiable [B, T, F] compressed-magnitude + phase -> [B, length]."""
    cmag, phase = as_tensor(cmag), as_tensor(phase)
    mag = ops.power(cmag, 1.0 / stft_cfg.compression)
    real = ops.mul(mag, ops.cos(phase))
    imag = ops.mul(mag, ops.sin(phase))
    return dsp.istft_tensors(real, imag, stft_cfg, length)


def se_forward(net, noisy, emg_pred=None):
    """Waveform-level enhancement of one utterance on frozen weights."""
    cfg = net.cfg
    spec_n = dsp.stft(noisy, cfg.stft)
    emg_args = ()
    if cfg.multimodal:
        if emg_pred is None:
            raise InputError("multimodal enhancement requires the stage-1 waveform")
        if emg_pred.sample_rate != noisy.sample_rate:
            raise InputError("sample rates differ between inputs")
        if emg_pred.samples.shape[0] != noisy.samples.shape[0]:
            raise InputError("input lengths differ")
        spec_e = dsp.stft(emg_pred, cfg.stft)
        emg_args = (spec_e.compressed_mag[None], spec_e.phase[None])
    with no_grad():
        cmag, phase = enhance_spectra(
            net, spec_n.compressed_mag[None], spec_n.phase[None], *emg_args)
        wave = reconstruct_waveform(cmag, phase, cfg.stft, noisy.samples.shape[0])
    return dsp.Waveform(wave.numpy()[0], noisy.sample_rate)


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{name} loss component is not finite")
    return value


def stage2_loss(enh_wave, clean_wave, enh_cmag, enh_phase, clean_cmag, clean_phase,
                weights=(0.2, 0.9, 0.1, 0.3)):
    """Composite time + magnitude + complex + anti-wrapped phase loss.

    enh_* live on the tape; clean_* are constants. Waves are [B, L], spectral
    terms [B, T, F]. Returns a scalar tensor; non-finite components abort.
    """
    lam_t, lam_m, lam_c, lam_p = weights
    if min(weights) < 0:
        raise ConfigError("loss weights must be nonnegative")
    enh_wave, enh_cmag, enh_phase = as_tensor(enh_wave), as_tensor(enh_cmag), as_tensor(enh_phase)
    clean_wave = np.asarray(clean_wave)
    clean_cmag = np.asarray(clean_cmag)
    clean_phase = np.asarray(clean_phase)
    if enh_wave.shape != clean_wave.shape:
        raise ContractError(f"wave shapes differ: {enh_wave.shape} vs {clean_wave.shape}")
    if enh_cmag.shape != clean_cmag.shape or enh_phase.shape != clean_phase.shape:
        raise ContractError("spectral shapes differ between enhanced and clean")

    l_time = ops.mean(ops.absolute(ops.sub(enh_wave, Tensor(clean_wave))))
    dm = ops.sub(enh_cmag, Tensor(clean_cmag))
    l_mag = ops.mean(ops.mul(dm, dm))

    enh_r = ops.mul(enh_cmag, ops.cos(enh_phase))
    enh_i = ops.mul(enh_cmag, ops.sin(enh_phase))
    dr = ops.sub(enh_r, Tensor(clean_cmag * np.cos(clean_phase)))
    di = ops.sub(enh_i, Tensor(clean_cmag * np.sin(clean_phase)))
    l_complex = ops.mul(ops.add(ops.mean(ops.mul(dr, dr)), ops.mean(ops.mul(di, di))), 0.5)

    def diff(t, axis):
        n = t.shape[axis]
        return ops.sub(ops.narrow(t, axis, 1, n - 1), ops.narrow(t, axis, 0, n - 1))

    terms = [ops.mean(ops.anti_wrap(ops.sub(enh_phase, Tensor(clean_phase))))]
    if enh_phase.shape[-1] >= 2:
        gd = ops.sub(diff(enh_phase, -1), Tensor(np.diff(clean_phase, axis=-1)))
        terms.append(ops.mean(ops.anti_wrap(gd)))
    if enh_phase.shape[-2] >= 2:
        td = ops.sub(diff(enh_phase, -2), Tensor(np.diff(clean_phase, axis=-2)))
        terms.append(ops.mean(ops.anti_wrap(td)))
    l_phase = terms[0]
    for t in terms[1:]:
        l_phase = ops.add(l_phase, t)

    for name, comp in (("time", l_time), ("magnitude", l_mag),
                       ("complex", l_complex), ("phase", l_phase)):
        _check_finite(name, comp.numpy())
    total = ops.add(
        ops.add(ops.mul(l_time, lam_t), ops.mul(l_mag, lam_m)),
        ops.add(ops.mul(l_complex, lam_c), ops.mul(l_phase, lam_p)),
    )
    return total


def parameter_count_formula(cfg):
    """Closed-form parameter count; must match the live module walk exactly."""
    C, n = cfg.channels, cfg.num_tf_blocks
    di = cfg.expansion * C
    N, k = cfg.state_dim, cfg.conv_width

    dense_block = sum(9 * C * C * (i + 1) + C + 2 * C for i in range(4))
    encoder = (2 * C + C + 2 * C) + dense_block + (3 * C * C + C + 2 * C)
    cross = (2 * C * 2 * C + 2 * C) + (2 * C * C + C)
    mamba = 3 * C * di + di * (k + 3 + 3 * N + di)
    bi_mamba = 2 * mamba + (2 * C * C + C)
    tf_block = 4 * C + 2 * bi_mamba
    decoder_core = dense_block + (3 * C * C + C) + 2 * C
    mask_dec = decoder_core + (C + 1)
    complex_dec = decoder_core + (2 * C + 2)

    total = encoder + n * tf_block + mask_dec + complex_dec
    if cfg.multimodal:
        total += encoder + cross
    return total

"""Training loops, evaluation driver, and CSV logging for both stages.

Everything is seeded through ``corpus.stable_seed`` chains, so a fixed
RunConfig reproduces losses, checkpoints, and reports bit-exactly in
single-threaded runs.
"""

import csv
import os

import numpy as np

from . import corpus as corpus_mod
from . import dsp, emg2speech as e2s, metrics as metrics_mod, se_network as se
from .autodiff import Tensor, nn, no_grad, ops
from .autodiff.optim import AdamW, clip_grad_norm
from .corpus import stable_seed
from .errors import ConfigError, InputError, NumericError


class Stage1Model(nn.Module):
    def __init__(self, encoder, decoder):
        self.encoder = encoder
        self.decoder = decoder


def build_stage1(cfg):
    rng = np.random.default_rng(stable_seed(cfg.master_seed, "stage1-init"))
    enc = e2s.EmgEncoder(rng, d_model=cfg.emg_d_model, n_layers=cfg.emg_layers,
                         n_heads=cfg.emg_heads, d_ff=cfg.emg_ff)
    dec = e2s.AcousticDecoder(rng, d_hidden=cfg.dec_hidden)
    return Stage1Model(enc, dec)


def build_se(cfg, multimodal=None, num_tf_blocks=None):
    rng = np.random.default_rng(stable_seed(cfg.master_seed, "stage2-init"))
    return se.SeNetwork(cfg.se_config(multimodal=multimodal, num_tf_blocks=num_tf_blocks), rng)


def write_csv(path, rows, fieldnames):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                             for k, v in row.items()})


def load_manifest_split(cfg, split):
    path = os.path.join(cfg.corpus_dir, "manifest.tsv")
    if not os.path.exists(path):
        raise InputError(f"missing manifest {path}; run synth-corpus first")
    entries = [e for e in corpus_mod.load_manifest(path) if e.split == split]
    if not entries:
        raise InputError(f"manifest has no '{split}' entries")
    return entries


class _UtteranceCache:
    def __init__(self, cfg):
        self.cfg = cfg
        self.corpus_cfg = cfg.corpus_config()
        self._utts = {}

    def utterance(self, utt_id):
        if utt_id not in self._utts:
            self._utts[utt_id] = corpus_mod.utterance_from_id(
                self.cfg.master_seed, utt_id, self.corpus_cfg)
        return self._utts[utt_id]


def _check_finite_loss(value, step, what):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what} loss at step {step}; aborting")
    return float(value)


# -- stage 1 --------------------------------------------------------------------


class _Stage1Data:
    """Precomputed per-utterance EMG, labels, unit and log-mel targets."""

    def __init__(self, cfg, entries):
        cache = _UtteranceCache(cfg)
        proj_seed = stable_seed(cfg.master_seed, "unit-projection")
        self.items = []
        for entry in entries:
            utt = cache.utterance(entry.utt_id)
            units = e2s.pseudo_unit_targets(utt.clean, proj_seed)
            logmel = e2s.standardize_logmel(dsp.mel_spectrogram(utt.clean))
            self.items.append({
                "emg": utt.emg.samples.astype(np.float64),
                "labels": utt.phonemes,
                "units": units,
                "logmel": logmel,
            })
        self.min_frames = min(item["labels"].shape[0] for item in self.items)

    def batch(self, rng, batch_size, frames):
        frames = min(frames, self.min_frames)
        idx = rng.integers(0, len(self.items), size=batch_size)
        emg, labels, units, logmel = [], [], [], []
        for i in idx:
            item = self.items[int(i)]
            total = item["labels"].shape[0]
            start = int(rng.integers(0, total - frames + 1))
            emg.append(item["emg"][start * 20:(start + frames) * 20])
            labels.append(item["labels"][start:start + frames])
            units.append(item["units"][start:start + frames])
            logmel.append(item["logmel"][start:start + frames])
        return (np.stack(emg), np.stack(labels), np.stack(units), np.stack(logmel))

    def full_batch(self, frames):
        frames = min(frames, self.min_frames)
        return (np.stack([i["emg"][: frames * 20] for i in self.items]),
                np.stack([i["labels"][:frames] for i in self.items]),
                np.stack([i["units"][:frames] for i in self.items]),
                np.stack([i["logmel"][:frames] for i in self.items]))


def _stage1_losses(model, emg, labels, units, logmel, cfg):
    pred_units, logits = model.encoder(Tensor(emg))
    l_su = e2s.loss_su(pred_units, Tensor(units))
    l_p = e2s.loss_phoneme(logits, labels)
    l_total = e2s.loss_total(l_su, l_p, lambda_su=cfg.lambda_su, lambda_p=cfg.lambda_p)
    pred_mel = model.decoder(Tensor(units), teacher=Tensor(logmel))
    dm = ops.sub(pred_mel, Tensor(logmel))
    l_dec = ops.mean(ops.mul(dm, dm))
    return l_su, l_p, l_total, l_dec, logits


def train_emg(cfg, steps=None, log_path=None, ckpt_path=None, progress=None):
    """Train stage 1; returns (model, history rows, best val loss)."""
    steps = steps or cfg.emg_steps
    train_data = _Stage1Data(cfg, load_manifest_split(cfg, "train"))
    val_data = _Stage1Data(cfg, load_manifest_split(cfg, "val"))
    frames = int(round(cfg.crop_seconds * corpus_mod.FRAME_RATE))

    model = build_stage1(cfg)
    enc_params = [p for _, p in model.encoder.named_parameters()]
    dec_params = [p for _, p in model.decoder.named_parameters()]
    opt_enc = AdamW(enc_params, lr=cfg.emg_lr)
    opt_dec = AdamW(dec_params, lr=cfg.dec_lr)

    history, best = [], np.inf
    for step in range(1, steps + 1):
        rng = np.random.default_rng(stable_seed(cfg.master_seed, "emg-step", step))
        batch = train_data.batch(rng, cfg.batch_size, frames)
        l_su, l_p, l_total, l_dec, _ = _stage1_losses(model, *batch, cfg)
        model.zero_grad()
        l_total.backward()
        l_dec.backward()
        clip_grad_norm(enc_params, cfg.grad_clip)
        clip_grad_norm(dec_params, cfg.grad_clip)
        opt_enc.step()
        opt_dec.step()

        row = {"step": step, "split": "train",
               "loss_su": _check_finite_loss(l_su.numpy(), step, "unit"),
               "loss_p": _check_finite_loss(l_p.numpy(), step, "phoneme"),
               "loss_total": _check_finite_loss(l_total.numpy(), step, "total"),
               "loss_dec": _check_finite_loss(l_dec.numpy(), step, "decoder")}
        if step % cfg.log_every == 0 or step == 1 or step == steps:
            history.append(row)
            if progress:
                progress(row)

        if step % cfg.val_every == 0 or step == steps:
            with no_grad():
                vb = val_data.full_batch(frames)
                v_su, v_p, v_total, v_dec, _ = _stage1_losses(model, *vb, cfg)
            val_total = _check_finite_loss(v_total.numpy(), step, "validation")
            history.append({"step": step, "split": "val",
                            "loss_su": float(v_su.numpy()), "loss_p": float(v_p.numpy()),
                            "loss_total": val_total, "loss_dec": float(v_dec.numpy())})
            if val_total < best:
                best = val_total
                if ckpt_path:
                    from .checkpoint import save_checkpoint
                    from .config import config_to_dict
                    save_checkpoint(ckpt_path, model,
                                    {"kind": "stage1", "run": config_to_dict(cfg)})
    if log_path:
        write_csv(log_path, history,
                  ["step", "split", "loss_su", "loss_p", "loss_total", "loss_dec"])
    return model, history, best


def phoneme_accuracy(model, data, frames):
    emg, labels, _, _ = data.full_batch(frames)
    with no_grad():
        _, logits = model.encoder(Tensor(emg))
    pred = np.argmax(logits.numpy(), axis=-1)
    return float(np.mean(pred == labels))


# -- stage 2 --------------------------------------------------------------------


def _stage1_branch_wave(stage1, utt):
    return e2s.emg_to_speech(stage1.encoder, stage1.decoder, utt.emg)


class _Stage2Data:
    """Per-entry noisy mix, clean reference, and EMG-branch waveform."""

    def __init__(self, cfg, entries, branch_mode, stage1=None):
        if branch_mode not in ("none", "oracle", "stage1"):
            raise ConfigError(f"unknown branch mode {branch_mode!r}")
        if branch_mode == "stage1" and stage1 is None:
            raise ConfigError("stage-1 checkpoint required for the EMG branch")
        cache = _UtteranceCache(cfg)
        corpus_cfg = cache.corpus_cfg
        self.items = []
        for entry in entries:
            utt, noisy, _ = corpus_mod.realize_mix(cfg.master_seed, entry, corpus_cfg)
            branch = None
            if branch_mode == "oracle":
                branch = utt.clean
            elif branch_mode == "stage1":
                branch = _stage1_branch_wave(stage1, utt)
            self.items.append({"clean": utt.clean, "noisy": noisy, "branch": branch,
                               "entry": entry})
        self.min_samples = min(i["clean"].samples.shape[0] for i in self.items)

    def crop_batch(self, rng, batch_size, samples, hop):
        samples = min(samples, self.min_samples)
        samples -= samples % hop
        idx = rng.integers(0, len(self.items), size=batch_size)
        out = {"clean": [], "noisy": [], "branch": []}
        for i in idx:
            item = self.items[int(i)]
            total = item["clean"].samples.shape[0]
            start = int(rng.integers(0, (total - samples) // hop + 1)) * hop
            for key in out:
                if item[key] is None:
                    out[key].append(None)
                else:
                    out[key].append(item[key].samples[start:start + samples])
        return out, samples

    def fixed_batch(self, samples, hop):
        samples = min(samples, self.min_samples)
        samples -= samples % hop
        out = {"clean": [], "noisy": [], "branch": []}
        for item in self.items:
            for key in out:
                arr = item[key]
                out[key].append(None if arr is None else arr.samples[:samples])
        return out, samples


def _spectral_batch(waves, stft_cfg):
    cmag, phase = [], []
    for w in waves:
        spec = dsp.stft(dsp.Waveform(w), stft_cfg)
        cmag.append(spec.compressed_mag)
        phase.append(spec.phase)
    return np.stack(cmag), np.stack(phase)


def _stage2_losses(net, batch, samples):
    stft_cfg = net.cfg.stft
    n_cmag, n_phase = _spectral_batch(batch["noisy"], stft_cfg)
    c_cmag, c_phase = _spectral_batch(batch["clean"], stft_cfg)
    emg_args = ()
    if net.cfg.multimodal:
        e_cmag, e_phase = _spectral_batch(batch["branch"], stft_cfg)
        emg_args = (e_cmag, e_phase)
    enh_cmag, enh_phase = se.enhance_spectra(net, n_cmag, n_phase, *emg_args)
    enh_wave = se.reconstruct_waveform(enh_cmag, enh_phase, stft_cfg, samples)
    clean_wave = np.stack(batch["clean"])
    total = se.stage2_loss(enh_wave, clean_wave, enh_cmag, enh_phase,
                           c_cmag, c_phase, weights=net.cfg.weights)
    return total


def stage2_loss_components(net, batch, samples):
    """Forward pass returning each unweighted loss component for logging."""
    stft_cfg = net.cfg.stft
    n_cmag, n_phase = _spectral_batch(batch["noisy"], stft_cfg)
    c_cmag, c_phase = _spectral_batch(batch["clean"], stft_cfg)
    emg_args = ()
    if net.cfg.multimodal:
        emg_args = _spectral_batch(batch["branch"], stft_cfg)
    enh_cmag, enh_phase = se.enhance_spectra(net, n_cmag, n_phase, *emg_args)
    enh_wave = se.reconstruct_waveform(enh_cmag, enh_phase, stft_cfg, samples)
    clean_wave = np.stack(batch["clean"])
    lam_t, lam_m, lam_c, lam_p = net.cfg.weights
    parts = {}
    for name, weights in (("time", (1, 0, 0, 0)), ("mag", (0, 1, 0, 0)),
                          ("complex", (0, 0, 1, 0)), ("phase", (0, 0, 0, 1))):
        with no_grad():
            parts[name] = float(se.stage2_loss(
                Tensor(enh_wave.numpy()), clean_wave, Tensor(enh_cmag.numpy()),
                Tensor(enh_phase.numpy()), c_cmag, c_phase, weights=weights).numpy())
    total = se.stage2_loss(enh_wave, clean_wave, enh_cmag, enh_phase,
                           c_cmag, c_phase, weights=net.cfg.weights)
    return total, parts


def train_se(cfg, steps=None, log_path=None, ckpt_path=None, stage1=None,
             progress=None, multimodal=None, num_tf_blocks=None):
    """Train stage 2; returns (net, history rows, best val loss)."""
    steps = steps or cfg.se_steps
    net = build_se(cfg, multimodal=multimodal, num_tf_blocks=num_tf_blocks)
    branch_mode = "none" if not net.cfg.multimodal else ("oracle" if cfg.oracle_emg else "stage1")
    train_data = _Stage2Data(cfg, load_manifest_split(cfg, "train"), branch_mode, stage1)
    val_data = _Stage2Data(cfg, load_manifest_split(cfg, "val"), branch_mode, stage1)

    params = [p for _, p in net.named_parameters()]
    opt = AdamW(params, lr=cfg.se_lr)
    crop = int(round(cfg.crop_seconds * dsp.AUDIO_RATE))
    hop = net.cfg.stft.hop

    history, best = [], np.inf
    for step in range(1, steps + 1):
        rng = np.random.default_rng(stable_seed(cfg.master_seed, "se-step", step))
        batch, samples = train_data.crop_batch(rng, cfg.batch_size, crop, hop)
        total, parts = stage2_loss_components(net, batch, samples)
        net.zero_grad()
        total.backward()
        clip_grad_norm(params, cfg.grad_clip)
        opt.step()
        value = _check_finite_loss(total.numpy(), step, "composite")

        if step % cfg.log_every == 0 or step == 1 or step == steps:
            row = {"step": step, "split": "train", "loss_total": value,
                   "loss_time": parts["time"], "loss_mag": parts["mag"],
                   "loss_complex": parts["complex"], "loss_phase": parts["phase"]}
            history.append(row)
            if progress:
                progress(row)

        if step % cfg.val_every == 0 or step == steps:
            vb, vs = val_data.fixed_batch(crop, hop)
            with no_grad():
                val_total = float(_stage2_losses(net, vb, vs).numpy())
            _check_finite_loss(val_total, step, "validation")
            history.append({"step": step, "split": "val", "loss_total": val_total,
                            "loss_time": "", "loss_mag": "", "loss_complex": "",
                            "loss_phase": ""})
            if val_total < best:
                best = val_total
                if ckpt_path:
                    from .checkpoint import save_checkpoint
                    from .config import config_to_dict
                    save_checkpoint(ckpt_path, net, {
                        "kind": "stage2", "run": config_to_dict(cfg),
                        "multimodal": net.cfg.multimodal,
                        "num_tf_blocks": net.cfg.num_tf_blocks})
    if log_path:
        write_csv(log_path, history, ["step", "split", "loss_total", "loss_time",
                                      "loss_mag", "loss_complex", "loss_phase"])
    return net, history, best


# -- evaluation -------------------------------------------------------------------


def _split_condition(split):
    return {"test_matched": "matched", "test_mismatched": "mismatched"}[split]


def evaluate_systems(cfg, systems, splits=("test_matched", "test_mismatched"),
                     stage1=None):
    """Metric items for the noisy baseline plus each (name, net) system.

    systems: list of (system_name, net_or_None); None rows are the unprocessed
    noisy baseline. Multimodal nets use the branch implied by cfg (oracle or
    stage-1 chain).
    """
    cache = _UtteranceCache(cfg)
    items = []
    for split in splits:
        condition = _split_condition(split)
        for entry in load_manifest_split(cfg, split):
            utt, noisy, _ = corpus_mod.realize_mix(cfg.master_seed, entry, cache.corpus_cfg)
            waves = {}
            for name, net in systems:
                if net is None:
                    waves[name] = noisy
                    continue
                branch = None
                if net.cfg.multimodal:
                    branch = utt.clean if cfg.oracle_emg else _stage1_branch_wave(stage1, utt)
                waves[name] = se.se_forward(net, noisy, branch)
            for name, wave in waves.items():
                stoi = metrics_mod.stoi(utt.clean, wave)
                sisdr = metrics_mod.si_sdr(utt.clean, wave)
                for metric, value in (("stoi", stoi), ("si_sdr", sisdr)):
                    items.append(metrics_mod.MetricItem(
                        condition=condition, noise_kind=entry.noise_kind,
                        snr_db=entry.snr_db, system=name, metric=metric, value=value))
    return items

"""Flat run configuration: dataclass defaults, key=value files, CLI overrides."""

import dataclasses
from dataclasses import dataclass

from . import corpus as corpus_mod
from . import dsp
from .errors import ConfigError
from .se_network import SeConfig


@dataclass
class RunConfig:
    master_seed: int = 1234

    # paths
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    log_dir: str = "logs"

    # corpus sizes
    n_train: int = 64
    n_val: int = 8
    n_test: int = 8
    base_duration: float = 2.0

    # STFT
    n_fft: int = 400
    hop: int = 100
    compression: float = 0.3

    # stage 1
    lambda_su: float = 0.5
    lambda_p: float = 0.5
    emg_lr: float = 0.0003
    dec_lr: float = 0.0001
    emg_steps: int = 2000
    emg_d_model: int = 128
    emg_layers: int = 2
    emg_heads: int = 4
    emg_ff: int = 512
    dec_hidden: int = 128
    # the source protocol's full budget, kept for full-scale runs
    paper_step_budget: int = 80000

    # stage 2
    se_lr: float = 0.0003
    se_steps: int = 2000
    num_tf_blocks: int = 4
    channels: int = 16
    multimodal: bool = True
    oracle_emg: bool = False
    state_dim: int = 16
    conv_width: int = 4
    lambda_time: float = 0.2
    lambda_mag: float = 0.9
    lambda_complex: float = 0.1
    lambda_phase: float = 0.3

    # shared training
    batch_size: int = 4
    crop_seconds: float = 1.0
    grad_clip: float = 5.0
    val_every: int = 200
    log_every: int = 10

    def __post_init__(self):
        if self.lambda_su < 0 or self.lambda_p < 0:
            raise ConfigError("stage-1 loss weights must be nonnegative")
        for name in ("emg_lr", "dec_lr", "se_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("emg_steps", "se_steps", "batch_size", "val_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")

    def stft_config(self):
        return dsp.StftConfig(n_fft=self.n_fft, hop=self.hop, compression=self.compression)

    def corpus_config(self):
        return corpus_mod.CorpusConfig(
            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
            base_duration=self.base_duration)

    def se_config(self, multimodal=None, num_tf_blocks=None):
        return SeConfig(
            num_tf_blocks=self.num_tf_blocks if num_tf_blocks is None else num_tf_blocks,
            channels=self.channels,
            multimodal=self.multimodal if multimodal is None else multimodal,
            stft=self.stft_config(),
            lambda_time=self.lambda_time, lambda_mag=self.lambda_mag,
            lambda_complex=self.lambda_complex, lambda_phase=self.lambda_phase,
            state_dim=self.state_dim, conv_width=self.conv_width)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key, text):
    kind = _FIELDS[key]
    text = text.strip()
    try:
        if kind == "bool" or kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int" or kind is int:
            return int(text)
        if kind == "float" or kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={text!r} as {kind}")


def load_config(path=None, overrides=None):
    """Build a RunConfig from an optional key=value file plus override pairs."""
    values = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, text = (part.strip() for part in line.split("=", 1))
                if key not in _FIELDS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, text)
    for key, text in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, text)
    return RunConfig(**values)


def parse_override_args(args):
    """['--key', 'value', ...] -> {key: value}; rejects malformed pairs."""
    if len(args) % 2:
        raise ConfigError(f"dangling override {args[-1]!r}; expected --key value pairs")
    out = {}
    for flag, value in zip(args[::2], args[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        out[flag[2:].replace("-", "_")] = value
    return out


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_from_dict(data):
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return RunConfig(**data)

"""Command-line entry point.

Subcommands: synth-corpus, train-emg, train-se, enhance, eval, selfcheck.
Config-driven commands read an optional key=value file (--config) and accept
``--key value`` overrides for any RunConfig field. Exit codes: 0 success,
1 selfcheck failure, 2 configuration error, 3 input error, 4 numeric error.
"""

import argparse
import os
import sys

from . import corpus as corpus_mod
from . import dsp, metrics as metrics_mod, se_network as se
from .checkpoint import load_checkpoint, restore_module
from .config import config_from_dict, load_config, parse_override_args
from .errors import ConfigError, InputError, NumericError


def _load_run_config(args, extra):
    return load_config(args.config, parse_override_args(extra))


def _require_no_extra(extra):
    if extra:
        raise ConfigError(f"unexpected arguments: {extra}")


def _mix_filename(entry):
    return f"{entry.utt_id}_{entry.noise_kind}_snr{entry.snr_db:g}.wav"


def cmd_synth_corpus(args, extra, out=print):
    cfg = _load_run_config(args, extra)
    corpus_cfg = cfg.corpus_config()
    manifest = corpus_mod.make_manifest(corpus_cfg, cfg.master_seed)
    root = cfg.corpus_dir
    for sub in ("clean", "emg", "noisy"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    corpus_mod.save_manifest(os.path.join(root, "manifest.tsv"), manifest)

    seen = set()
    for entry in manifest:
        utt, noisy, _ = corpus_mod.realize_mix(cfg.master_seed, entry, corpus_cfg)
        if entry.utt_id not in seen:
            seen.add(entry.utt_id)
            dsp.write_wav(os.path.join(root, "clean", f"{entry.utt_id}.wav"), utt.clean)
            corpus_mod.write_emg8(os.path.join(root, "emg", f"{entry.utt_id}.emg8"), utt.emg)
        dsp.write_wav(os.path.join(root, "noisy", _mix_filename(entry)), noisy)
    out(f"wrote {len(seen)} utterances and {len(manifest)} mixes under {root}")
    return 0


def cmd_train_emg(args, extra, out=print):
    cfg = _load_run_config(args, extra)
    from .training import train_emg

    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    ckpt = os.path.join(cfg.checkpoint_dir, "stage1.ckpt")
    log = os.path.join(cfg.log_dir, "train_emg.csv")
    _, _, best = train_emg(
        cfg, log_path=log, ckpt_path=ckpt,
        progress=lambda row: out(
            f"step {row['step']}: total {row['loss_total']:.4f} "
            f"(su {row['loss_su']:.4f}, p {row['loss_p']:.4f}, dec {row['loss_dec']:.4f})"))
    out(f"best validation loss {best:.6f}; checkpoint {ckpt}; log {log}")
    return 0


def _stage1_from_checkpoint(path, out=None):
    from .training import build_stage1

    if not os.path.exists(path):
        raise ConfigError(f"stage-1 checkpoint {path} not found")
    blob, tensors = load_checkpoint(path)
    if blob.get("kind") != "stage1":
        raise InputError(f"{path} is not a stage-1 checkpoint")
    model = build_stage1(config_from_dict(blob["run"]))
    restore_module(model, tensors)
    return model


def cmd_train_se(args, extra, out=print):
    cfg = _load_run_config(args, extra)
    from .training import build_se, train_se

    stage1 = None
    if cfg.multimodal and not cfg.oracle_emg:
        stage1_path = args.stage1 or os.path.join(cfg.checkpoint_dir, "stage1.ckpt")
        stage1 = _stage1_from_checkpoint(stage1_path)

    probe = build_se(cfg)
    out(f"parameters: {probe.num_parameters()} "
        f"(closed form {se.parameter_count_formula(probe.cfg)})")

    name = f"se_mm_x{cfg.num_tf_blocks}" if cfg.multimodal else "se_ac"
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    ckpt = args.out or os.path.join(cfg.checkpoint_dir, f"{name}.ckpt")
    log = os.path.join(cfg.log_dir, f"train_{name}.csv")
    _, _, best = train_se(
        cfg, log_path=log, ckpt_path=ckpt, stage1=stage1,
        progress=lambda row: out(f"step {row['step']}: composite {row['loss_total']:.5f}"))
    out(f"best validation loss {best:.6f}; checkpoint {ckpt}; log {log}")
    return 0


def _se_from_checkpoint(path):
    from .training import build_se

    blob, tensors = load_checkpoint(path)
    if blob.get("kind") != "stage2":
        raise InputError(f"{path} is not a stage-2 checkpoint")
    run = config_from_dict(blob["run"])
    net = build_se(run, multimodal=blob["multimodal"], num_tf_blocks=blob["num_tf_blocks"])
    restore_module(net, tensors)
    return net, run


def cmd_enhance(args, extra, out=print):
    _require_no_extra(extra)
    noisy = dsp.read_wav(args.noisy)
    net, _ = _se_from_checkpoint(args.checkpoint)

    if args.pass_through:
        spec = dsp.stft(noisy, net.cfg.stft)
        enhanced = dsp.Waveform(dsp.istft(spec, length=noisy.samples.shape[0]))
    else:
        branch = None
        if net.cfg.multimodal:
            if args.branch_wav:
                branch = dsp.read_wav(args.branch_wav)
            elif args.emg:
                if not args.stage1:
                    raise ConfigError("--stage1 checkpoint required to drive the EMG branch")
                stage1 = _stage1_from_checkpoint(args.stage1)
                from .emg2speech import emg_to_speech

                rec = corpus_mod.read_emg8(args.emg)
                branch = emg_to_speech(stage1.encoder, stage1.decoder, rec)
            else:
                raise InputError("multimodal checkpoint needs --emg or --branch-wav")
        enhanced = se.se_forward(net, noisy, branch)

    dsp.write_wav(args.out, enhanced)
    out(f"wrote {args.out} ({enhanced.samples.shape[0]} samples)")
    if args.clean:
        clean = dsp.read_wav(args.clean)
        out(f"stoi {metrics_mod.stoi(clean, enhanced):.4f} "
            f"si_sdr {metrics_mod.si_sdr(clean, enhanced):.2f} dB")
    return 0


def _corpus_keys():
    return ("master_seed", "n_train", "n_val", "n_test", "base_duration",
            "n_fft", "hop", "compression")


def _check_compatible(run, cfg, path):
    for key in _corpus_keys():
        if getattr(run, key) != getattr(cfg, key):
            raise ConfigError(
                f"checkpoint {path} was trained with {key}={getattr(run, key)!r} "
                f"but eval config has {getattr(cfg, key)!r}")


def cmd_eval(args, extra, out=print):
    cfg = _load_run_config(args, extra)
    from .training import evaluate_systems

    systems = [("noisy", None)]
    needs_stage1 = False
    for path in args.se_ac or []:
        net, run = _se_from_checkpoint(path)
        _check_compatible(run, cfg, path)
        if net.cfg.multimodal:
            raise ConfigError(f"{path} is multimodal; pass it via --multimodal")
        systems.append(("se_ac", net))
    for path in args.multimodal or []:
        net, run = _se_from_checkpoint(path)
        _check_compatible(run, cfg, path)
        if not net.cfg.multimodal:
            raise ConfigError(f"{path} is unimodal; pass it via --se-ac")
        systems.append((f"tf_mamba_x{net.cfg.num_tf_blocks}", net))
        needs_stage1 = True

    stage1 = None
    if needs_stage1 and not cfg.oracle_emg:
        stage1 = _stage1_from_checkpoint(
            args.stage1 or os.path.join(cfg.checkpoint_dir, "stage1.ckpt"))

    items = evaluate_systems(cfg, systems, stage1=stage1)
    report = metrics_mod.aggregate_report(items)
    metrics_mod.write_report_csv(args.out, report)
    out(f"wrote {args.out} ({len(report)} rows, {len(items)} measurements)")
    return 0


def cmd_selfcheck(args, extra, out=print):
    _require_no_extra(extra)
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(inject_fault=args.inject_fault, emit=out) else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="emgse",
        description="Two-stage multi-modal (EMG + audio) speech enhancement")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="key=value config file")
        return p

    with_config(sub.add_parser("synth-corpus", help="write the synthetic corpus"))
    with_config(sub.add_parser("train-emg", help="train the stage-1 EMG encoder"))

    p_se = with_config(sub.add_parser("train-se", help="train the stage-2 enhancer"))
    p_se.add_argument("--stage1", default=None, help="stage-1 checkpoint path")
    p_se.add_argument("--out", default=None, help="checkpoint output path")

    p_enh = sub.add_parser("enhance", help="enhance one noisy WAV")
    p_enh.add_argument("--checkpoint", required=True)
    p_enh.add_argument("--noisy", required=True)
    p_enh.add_argument("--out", required=True)
    p_enh.add_argument("--emg", default=None, help="raw EMG .emg8 file")
    p_enh.add_argument("--branch-wav", default=None, help="precomputed stage-1 WAV")
    p_enh.add_argument("--stage1", default=None, help="stage-1 checkpoint for --emg")
    p_enh.add_argument("--clean", default=None, help="clean reference for metrics")
    p_enh.add_argument("--pass-through", action="store_true",
                       help="debug: mask=1, noisy phase (identity path)")

    p_eval = with_config(sub.add_parser("eval", help="metric report over the test sets"))
    p_eval.add_argument("--se-ac", action="append", default=None)
    p_eval.add_argument("--multimodal", action="append", default=None)
    p_eval.add_argument("--stage1", default=None)
    p_eval.add_argument("--out", default="report.csv")

    p_chk = sub.add_parser("selfcheck", help="run the numerical release gate")
    p_chk.add_argument("--inject-fault", action="store_true",
                       help="demonstrate detection by corrupting one backward rule")
    return parser


COMMANDS = {
    "synth-corpus": cmd_synth_corpus,
    "train-emg": cmd_train_emg,
    "train-se": cmd_train_se,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Release-gate self verification.

Runs fast numerical property checks (gradients, scan oracle, STFT round trip,
loss identities, SNR exactness, STOI sanity) and reports one pass/fail line
per check. ``inject_fault=True`` deliberately perturbs one backward rule via
``ops.fault_hooks`` to demonstrate that the harness actually detects errors.
"""

import time

import numpy as np

from . import corpus as corpus_mod
from . import dsp, emg2speech as e2s, metrics as metrics_mod, se_network as se
from .autodiff import Tensor, check_gradients, ops, using_dtype
from .ssm import selective_scan


def _naive_scan(u, dt, A, B_in, C_out, D):
    B, d, L = u.shape
    N = A.shape[1]
    y = np.zeros_like(u)
    for b in range(B):
        for i in range(d):
            h = np.zeros(N)
            for t in range(L):
                h = np.exp(dt[b, i, t] * A[i]) * h + dt[b, i, t] * B_in[b, :, t] * u[b, i, t]
                y[b, i, t] = C_out[b, :, t] @ h + D[i] * u[b, i, t]
    return y


def _check_gradient_primitives():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def f(x, w):
        return ops.mean(ops.tanh(ops.matmul(ops.sigmoid(x), w)))

    err = check_gradients(f, [x, w], tol=1e-4)
    return f"max rel err {err:.2e} (tol 1e-4)"


def _check_gradient_composite():
    from .ssm import TfMambaBlock

    rng = np.random.default_rng(1)
    block = TfMambaBlock(2, rng, state_dim=2, conv_width=2)
    x = Tensor(rng.normal(size=(1, 2, 3, 4)) * 0.3, requires_grad=True)

    def f(x):
        y = block(x)
        return ops.mean(ops.mul(y, y))

    err = check_gradients(f, [x], tol=1e-4)
    return f"max rel err {err:.2e} (tol 1e-4)"


def _check_scan_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10):
        B, d, L, N = 2, 3, int(rng.integers(4, 17)), 4
        u = rng.normal(size=(B, d, L))
        dt = rng.uniform(0.05, 1.0, size=(B, d, L))
        A = -rng.uniform(0.1, 2.0, size=(d, N))
        B_in = rng.normal(size=(B, N, L))
        C_out = rng.normal(size=(B, N, L))
        D = rng.normal(size=d)
        got = selective_scan(Tensor(u), Tensor(dt), Tensor(A), Tensor(B_in),
                             Tensor(C_out), Tensor(D)).numpy()
        worst = max(worst, float(np.abs(got - _naive_scan(u, dt, A, B_in, C_out, D)).max()))
    if worst > 1e-10:
        raise AssertionError(f"scan deviates from the sequential oracle by {worst:.2e}")
    return f"max abs dev {worst:.2e} (tol 1e-10)"


def _check_stft_round_trip():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(3):
        wave = dsp.Waveform(rng.normal(size=16000) * 0.3)
        spec = dsp.stft(wave)
        back = dsp.istft(spec, length=16000)
        rel = np.linalg.norm(back - wave.samples) / np.linalg.norm(wave.samples)
        worst = max(worst, float(rel))
    if worst > 1e-6:
        raise AssertionError(f"round-trip relative error {worst:.2e} > 1e-6")
    return f"max rel err {worst:.2e} (tol 1e-6)"


def _check_loss_identities():
    x = Tensor(np.random.default_rng(4).normal(size=(1, 6, 8)))
    if e2s.loss_su(x, Tensor(x.numpy().copy())).numpy() != 0.0:
        raise AssertionError("unit loss is nonzero on identical sequences")
    lp = e2s.loss_phoneme(Tensor(np.zeros((1, 5, 16))), np.zeros((1, 5), dtype=int))
    if abs(lp.numpy() - np.log(16.0)) > 1e-10:
        raise AssertionError("uniform-logit phoneme loss differs from ln 16")
    total = e2s.loss_total(2.0, 4.0, lambda_su=0.5, lambda_p=0.5).numpy()
    if total != 3.0:
        raise AssertionError("weighted stage-1 total mismatch")
    rng = np.random.default_rng(5)
    wave = rng.normal(size=(1, 64))
    cmag = np.abs(rng.normal(size=(1, 3, 5)))
    phase = rng.uniform(-3, 3, size=(1, 3, 5))
    s2 = se.stage2_loss(Tensor(wave.copy()), wave, Tensor(cmag.copy()),
                        Tensor(phase.copy()), cmag, phase).numpy()
    if s2 != 0.0:
        raise AssertionError("stage-2 loss nonzero when enhanced equals clean")
    return "all four identities hold"


def _check_snr_exactness():
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(20):
        utt = corpus_mod.synth_utterance(int(rng.integers(1 << 30)), 0.5)
        spec = corpus_mod.MixSpec(
            noise_kind=corpus_mod.NOISE_KINDS[i % len(corpus_mod.NOISE_KINDS)],
            snr_db=float(rng.choice([-10, -5, 0, 5, 10])), seed=int(rng.integers(1 << 30)))
        noise = corpus_mod.synth_noise(spec, utt.clean.samples.shape[0])
        mixed, _ = corpus_mod.mix_at_snr(utt.clean, noise, spec.snr_db)
        achieved = metrics_mod.measured_snr_db(mixed, utt.clean)
        worst = max(worst, abs(achieved - spec.snr_db))
    if worst > 0.01:
        raise AssertionError(f"achieved SNR off by {worst:.4f} dB > 0.01")
    return f"max dev {worst:.2e} dB (tol 0.01)"


def _check_stoi_properties():
    utt = corpus_mod.synth_utterance(7, 1.0)
    self_score = metrics_mod.stoi(utt.clean, utt.clean)
    if self_score < 0.999:
        raise AssertionError(f"self STOI {self_score:.4f} < 0.999")
    scores = []
    for snr in (-10.0, 0.0, 10.0):
        spec = corpus_mod.MixSpec(noise_kind="white", snr_db=snr, seed=8)
        noise = corpus_mod.synth_noise(spec, utt.clean.samples.shape[0])
        mixed, _ = corpus_mod.mix_at_snr(utt.clean, noise, snr)
        scores.append(metrics_mod.stoi(utt.clean, mixed))
    if not (scores[0] < scores[1] < scores[2]):
        raise AssertionError(f"STOI not monotone in SNR: {scores}")
    return f"self {self_score:.4f}, monotone {['%.3f' % s for s in scores]}"


CHECKS = [
    ("gradient-primitives", _check_gradient_primitives),
    ("gradient-composite", _check_gradient_composite),
    ("scan-oracle", _check_scan_oracle),
    ("stft-round-trip", _check_stft_round_trip),
    ("loss-identities", _check_loss_identities),
    ("snr-exactness", _check_snr_exactness),
    ("stoi-properties", _check_stoi_properties),
]


def run_selfcheck(inject_fault=False, emit=print):
    """Run every check in 64-bit mode; returns True when all pass."""
    all_ok = True
    if inject_fault:
        ops.fault_hooks["tanh_backward"] = 1.01
        emit("fault injection active: tanh backward scaled by 1.01")
    try:
        with using_dtype(np.float64):
            for name, fn in CHECKS:
                start = time.perf_counter()
                try:
                    detail = fn()
                    ok = True
                except AssertionError as exc:
                    detail, ok = str(exc), False
                all_ok &= ok
                status = "PASS" if ok else "FAIL"
                emit(f"[{status}] {name}: {detail} ({time.perf_counter() - start:.2f}s)")
    finally:
        ops.fault_hooks.pop("tanh_backward", None)
    emit("selfcheck " + ("PASSED" if all_ok else "FAILED"))
    return all_ok

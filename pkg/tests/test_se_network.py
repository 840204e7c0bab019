import numpy as np
import pytest

from emgse import dsp, se_network as se
from emgse.autodiff import Tensor, check_gradients, no_grad, ops
from emgse.errors import ConfigError, ContractError, InputError, NumericError, ShapeError


def tiny_cfg(**kw):
    base = dict(num_tf_blocks=1, channels=4, multimodal=True,
                stft=dsp.StftConfig(n_fft=8, hop=2), state_dim=4, conv_width=2)
    base.update(kw)
    return se.SeConfig(**base)


def rand_stacked(rng, B, T, F):
    cmag = np.abs(rng.normal(size=(B, 1, T, F)))
    phase = rng.uniform(-np.pi + 1e-6, np.pi, size=(B, 1, T, F))
    return np.concatenate([cmag, phase], axis=1)


def test_config_validation():
    cfg = se.SeConfig()
    assert cfg.num_tf_blocks == 4 and cfg.channels == 16 and cfg.multimodal
    assert cfg.weights == (0.2, 0.9, 0.1, 0.3)
    with pytest.raises(ConfigError):
        se.SeConfig(num_tf_blocks=0)
    with pytest.raises(ConfigError):
        se.SeConfig(channels=0)
    with pytest.raises(ConfigError):
        se.SeConfig(lambda_mag=-0.1)


# -- dense encoder ----------------------------------------------------------


def test_encoder_shapes():
    enc = se.DenseEncoder(4, np.random.default_rng(0))
    x = Tensor(rand_stacked(np.random.default_rng(1), 2, 6, 9))
    y = enc(x)
    assert y.shape == (2, 4, 6, 4)


def test_encoder_rejects_even_or_tiny_f():
    enc = se.DenseEncoder(4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 2, 4, 8))))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 2, 4, 1))))
    with pytest.raises(ShapeError):
        enc(Tensor(np.zeros((1, 4, 4, 9))))


def test_encoder_receptive_field_confined():
    # dilations 1+2+4+8 give a +/-15 frame receptive field along time
    enc = se.DenseEncoder(3, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    base = rand_stacked(rng, 1, 40, 9)
    bumped = base.copy()
    t0 = 20
    bumped[0, 0, t0, 4] += 1.0
    with no_grad():
        d = enc(Tensor(bumped)).numpy() - enc(Tensor(base)).numpy()
    energy_t = np.abs(d).max(axis=(0, 1, 3))
    assert energy_t[t0] > 0
    outside = np.r_[energy_t[: t0 - 15], energy_t[t0 + 16:]]
    assert np.all(outside == 0.0)
    assert energy_t[t0 - 15] > 0 or energy_t[t0 + 15] > 0


def test_two_encoders_do_not_share_parameters():
    net = se.SeNetwork(tiny_cfg(), np.random.default_rng(4))
    ids_ac = {id(p) for n, p in net.named_parameters() if n.startswith("enc_ac")}
    ids_emg = {id(p) for n, p in net.named_parameters() if n.startswith("enc_emg")}
    assert ids_ac and ids_emg and not ids_ac & ids_emg


# -- cross fuse ----------------------------------------------------------------


def test_cross_fuse_projection_identity():
    C = 3
    fuse = se.CrossFuse(C, np.random.default_rng(5), residual=False)
    w1 = np.zeros((2 * C, 2 * C))
    w1[:C, :C] = np.eye(C)          # first half passes the acoustic features
    w1[:C, C:] = -np.eye(C)         # second half carries their negation
    fuse.fc1.weight.data[...] = w1
    fuse.fc1.bias.data[...] = 0.0
    w2 = np.zeros((2 * C, C))
    w2[:C] = np.eye(C)
    w2[C:] = -np.eye(C)             # relu(x) - relu(-x) = x
    fuse.fc2.weight.data[...] = w2
    fuse.fc2.bias.data[...] = 0.0
    rng = np.random.default_rng(6)
    ac = Tensor(rng.normal(size=(2, C, 5, 4)))
    emg = Tensor(rng.normal(size=(2, C, 5, 4)))
    np.testing.assert_array_equal(fuse(ac, emg).numpy(), ac.numpy())


def test_cross_fuse_depends_on_emg():
    fuse = se.CrossFuse(4, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    ac = Tensor(rng.normal(size=(1, 4, 5, 6)))
    emg = Tensor(rng.normal(size=(1, 4, 5, 6)))
    emg2 = Tensor(emg.numpy() + 0.1)
    assert np.abs(fuse(ac, emg).numpy() - fuse(ac, emg2).numpy()).max() > 1e-9


def test_cross_fuse_shape_contract():
    fuse = se.CrossFuse(16, np.random.default_rng(9))
    rng = np.random.default_rng(10)
    a = Tensor(rng.normal(size=(2, 16, 10, 50)))
    b = Tensor(rng.normal(size=(2, 16, 10, 50)))
    assert fuse(a, b).shape == (2, 16, 10, 50)
    with pytest.raises(ShapeError):
        fuse(a, Tensor(rng.normal(size=(2, 16, 10, 49))))


# -- decoders --------------------------------------------------------------------


def test_mask_decoder_range_and_shape():
    dec = se.MaskDecoder(4, np.random.default_rng(11))
    feat = Tensor(np.random.default_rng(12).normal(size=(2, 4, 6, 4)))
    m = dec(feat).numpy()
    assert m.shape == (2, 1, 6, 9)  # frequency restored to 2*4+1
    assert np.all(m > 0.0) and np.all(m < 2.0)


def test_mask_decoder_identity_at_zero_preactivation():
    dec = se.MaskDecoder(4, np.random.default_rng(13))
    dec.out.weight.data[...] = 0.0
    dec.out.bias.data[...] = 0.0
    feat = Tensor(np.random.default_rng(14).normal(size=(1, 4, 5, 4)))
    np.testing.assert_array_equal(dec(feat).numpy(), 1.0)


def test_complex_decoder_shapes_and_phase_range():
    dec = se.ComplexDecoder(4, np.random.default_rng(15))
    feat = Tensor(np.random.default_rng(16).normal(size=(2, 4, 6, 4)))
    r, i = dec(feat)
    assert r.shape == (2, 1, 6, 9) and i.shape == (2, 1, 6, 9)
    phi = ops.atan2(i, r).numpy()
    assert np.all(phi > -np.pi - 1e-12) and np.all(phi <= np.pi)


def test_phase_conventions():
    assert ops.atan2(Tensor(np.array(0.0)), Tensor(np.array(1.0))).numpy() == 0.0
    assert ops.atan2(Tensor(np.array(1.0)), Tensor(np.array(0.0))).numpy() == np.pi / 2
    assert ops.atan2(Tensor(np.array(0.0)), Tensor(np.array(0.0))).numpy() == 0.0


# -- full network ------------------------------------------------------------------


def test_network_forward_shapes():
    net = se.SeNetwork(tiny_cfg(), np.random.default_rng(17))
    rng = np.random.default_rng(18)
    x_ac = Tensor(rand_stacked(rng, 1, 6, 9))
    x_emg = Tensor(rand_stacked(rng, 1, 6, 9))
    mask, r, i = net(x_ac, x_emg)
    assert mask.shape == (1, 1, 6, 9)
    assert r.shape == (1, 1, 6, 9) and i.shape == (1, 1, 6, 9)
    assert np.all(mask.numpy() > 0) and np.all(mask.numpy() < 2)


def test_multimodal_requires_emg_input():
    net = se.SeNetwork(tiny_cfg(), np.random.default_rng(19))
    with pytest.raises(ContractError):
        net(Tensor(rand_stacked(np.random.default_rng(20), 1, 4, 9)))


def test_unimodal_has_no_emg_parameters_and_ignores_emg():
    net = se.SeNetwork(tiny_cfg(multimodal=False), np.random.default_rng(21))
    names = [n for n, _ in net.named_parameters()]
    assert not any(n.startswith(("enc_emg", "cross")) for n in names)
    rng = np.random.default_rng(22)
    x_ac = Tensor(rand_stacked(rng, 1, 5, 9))
    with no_grad():
        a = net(x_ac, None)
        b = net(x_ac, Tensor(rand_stacked(rng, 1, 5, 9)))
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.numpy(), tb.numpy())


def test_gradients_reach_every_parameter():
    net = se.SeNetwork(tiny_cfg(), np.random.default_rng(23))
    rng = np.random.default_rng(24)
    x_ac = Tensor(rand_stacked(rng, 1, 5, 9))
    x_emg = Tensor(rand_stacked(rng, 1, 5, 9))
    mask, r, i = net(x_ac, x_emg)
    loss = ops.add(ops.mean(ops.mul(mask, mask)),
                   ops.add(ops.mean(ops.mul(r, r)), ops.mean(ops.mul(i, i))))
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


def test_network_gradient_spot_checks():
    net = se.SeNetwork(tiny_cfg(channels=2, state_dim=2, conv_width=2),
                       np.random.default_rng(25))
    rng = np.random.default_rng(26)
    x_ac = Tensor(rand_stacked(rng, 1, 4, 5), requires_grad=True)
    x_emg = Tensor(rand_stacked(rng, 1, 4, 5))
    probes = [x_ac,
              net.cross.fc1.weight,
              net.enc_ac.entry.weight,
              net.blocks[0].time_bi.fwd.A_log,
              net.mask_dec.out.weight,
              net.complex_dec.out.bias]

    def f(*_):
        mask, r, i = net(x_ac, x_emg)
        return ops.add(ops.mean(ops.mul(mask, r)), ops.mean(ops.mul(i, i)))

    check_gradients(f, probes, tol=1e-4)


# -- reconstruction ----------------------------------------------------------------


def test_pass_through_reconstruction():
    # mask = 1 and noisy phase reproduce the input within round-trip tolerance
    rng = np.random.default_rng(27)
    wave = dsp.Waveform(rng.normal(size=3200) * 0.1)
    spec = dsp.stft(wave)
    with no_grad():
        out = se.reconstruct_waveform(spec.compressed_mag[None], spec.phase[None],
                                      dsp.StftConfig(), 3200).numpy()[0]
    rel = np.linalg.norm(out - wave.samples) / np.linalg.norm(wave.samples)
    assert rel < 1e-6


def test_reconstruct_waveform_gradient():
    cfg = dsp.StftConfig(n_fft=8, hop=2)
    rng = np.random.default_rng(28)
    cmag = Tensor(np.abs(rng.normal(size=(1, 3, 5))) + 0.2, requires_grad=True)
    phase = Tensor(rng.uniform(-3.0, 3.0, size=(1, 3, 5)), requires_grad=True)
    check_gradients(lambda c, p: ops.mean(ops.mul(
        se.reconstruct_waveform(c, p, cfg, 4),
        se.reconstruct_waveform(c, p, cfg, 4))), [cmag, phase])


def test_se_forward_end_to_end():
    cfg = tiny_cfg(stft=dsp.StftConfig())
    net = se.SeNetwork(cfg, np.random.default_rng(29))
    rng = np.random.default_rng(30)
    noisy = dsp.Waveform(rng.normal(size=4000) * 0.1)
    emg_pred = dsp.Waveform(rng.normal(size=4000) * 0.1)
    out = se.se_forward(net, noisy, emg_pred)
    assert out.samples.shape == (4000,)
    assert out.sample_rate == 16000
    with pytest.raises(InputError):
        se.se_forward(net, noisy, None)
    with pytest.raises(InputError):
        se.se_forward(net, noisy, dsp.Waveform(rng.normal(size=3900) * 0.1))


def test_se_forward_unimodal_invariant_to_emg():
    cfg = tiny_cfg(stft=dsp.StftConfig(), multimodal=False)
    net = se.SeNetwork(cfg, np.random.default_rng(31))
    rng = np.random.default_rng(32)
    noisy = dsp.Waveform(rng.normal(size=4000) * 0.1)
    outs = [se.se_forward(net, noisy, e).samples for e in
            (None,
             dsp.Waveform(np.zeros(4000)),
             dsp.Waveform(rng.normal(size=4000)),
             dsp.Waveform(rng.normal(size=2000)))]
    for other in outs[1:]:
        np.testing.assert_array_equal(outs[0], other)


# -- composite loss ------------------------------------------------------------------


def rand_loss_args(rng, B=1, L=32, T=3, F=5):
    return (rng.normal(size=(B, L)), np.abs(rng.normal(size=(B, T, F))) + 0.1,
            rng.uniform(-3, 3, size=(B, T, F)))


def test_stage2_loss_zero_on_identical():
    rng = np.random.default_rng(33)
    wave, cmag, phase = rand_loss_args(rng)
    out = se.stage2_loss(Tensor(wave.copy()), wave, Tensor(cmag.copy()),
                         Tensor(phase.copy()), cmag, phase)
    assert out.numpy() == 0.0


def test_stage2_loss_time_term_hand_value():
    rng = np.random.default_rng(34)
    wave, cmag, phase = rand_loss_args(rng)
    out = se.stage2_loss(Tensor(wave + 0.1), wave, Tensor(cmag.copy()),
                         Tensor(phase.copy()), cmag, phase,
                         weights=(0.7, 0.0, 0.0, 0.0))
    assert out.numpy() == pytest.approx(0.07, abs=1e-12)


def test_stage2_loss_phase_wrap_invariance():
    rng = np.random.default_rng(35)
    wave, cmag, phase = rand_loss_args(rng)
    out = se.stage2_loss(Tensor(wave.copy()), wave, Tensor(cmag.copy()),
                         Tensor(phase + 2 * np.pi), cmag, phase,
                         weights=(0.0, 0.0, 0.0, 1.0))
    assert abs(out.numpy()) < 1e-12


def test_stage2_loss_weight_validation_and_nan():
    rng = np.random.default_rng(36)
    wave, cmag, phase = rand_loss_args(rng)
    with pytest.raises(ConfigError):
        se.stage2_loss(Tensor(wave), wave, Tensor(cmag), Tensor(phase), cmag, phase,
                       weights=(-0.1, 0.9, 0.1, 0.3))
    bad = wave.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        se.stage2_loss(Tensor(bad), wave, Tensor(cmag), Tensor(phase), cmag, phase)


def test_stage2_loss_shape_contracts():
    rng = np.random.default_rng(37)
    wave, cmag, phase = rand_loss_args(rng)
    with pytest.raises(ContractError):
        se.stage2_loss(Tensor(wave[:, :-1]), wave, Tensor(cmag), Tensor(phase), cmag, phase)
    with pytest.raises(ContractError):
        se.stage2_loss(Tensor(wave), wave, Tensor(cmag[:, :-1]), Tensor(phase), cmag, phase)


def test_stage2_loss_gradient():
    rng = np.random.default_rng(38)
    wave, cmag, phase = rand_loss_args(rng)
    e_wave = Tensor(wave + 0.05 * rng.normal(size=wave.shape), requires_grad=True)
    e_cmag = Tensor(cmag * 1.1, requires_grad=True)
    # nonconstant offset keeps the |.| kinks of the anti-wrap terms away from 0
    e_phase = Tensor(phase + 0.3 + 0.1 * rng.normal(size=phase.shape), requires_grad=True)
    check_gradients(
        lambda w, m, p: se.stage2_loss(w, wave, m, p, cmag, phase),
        [e_wave, e_cmag, e_phase])


def test_stage2_loss_positive_on_mismatch():
    rng = np.random.default_rng(39)
    wave, cmag, phase = rand_loss_args(rng)
    out = se.stage2_loss(Tensor(wave + 0.2), wave, Tensor(cmag * 1.3),
                         Tensor(phase + 0.5), cmag, phase)
    assert out.numpy() > 0


# -- parameter accounting --------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(), dict(multimodal=False),
                                dict(channels=3, num_tf_blocks=2),
                                dict(channels=5, state_dim=3, conv_width=3)])
def test_parameter_count_formula_matches(kw):
    cfg = tiny_cfg(**kw)
    net = se.SeNetwork(cfg, np.random.default_rng(40))
    assert net.num_parameters() == se.parameter_count_formula(cfg)


def test_parameter_count_monotone_in_blocks():
    counts = [se.parameter_count_formula(tiny_cfg(num_tf_blocks=n)) for n in (1, 4, 8)]
    assert counts[0] < counts[1] < counts[2]


def test_enhance_spectra_contract():
    net = se.SeNetwork(tiny_cfg(), np.random.default_rng(41))
    rng = np.random.default_rng(42)
    cmag = np.abs(rng.normal(size=(2, 4, 9)))
    phase = rng.uniform(-3, 3, size=(2, 4, 9))
    with pytest.raises(ContractError):
        se.enhance_spectra(net, cmag, phase)
    e_cmag, e_phase = se.enhance_spectra(net, cmag, phase, cmag, phase)
    assert e_cmag.shape == (2, 4, 9) and e_phase.shape == (2, 4, 9)
    assert np.all(e_cmag.numpy() >= 0)

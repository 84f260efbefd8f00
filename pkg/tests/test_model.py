import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irrm import tensor as T
from irrm.model import (EB_KINDS, IRRM, PRESETS, Conv2d, EbConfig, EnhancedBlock, InvertibleResidualBlock,
                        LatentPyramid, ModelConfig, ResidualDownscalingModule, _he_std, count_params, describe,
                        macs_per_pixel, model_forward, model_inverse, sample_latents)
from irrm.tensor import Tensor
from irrm.train import loss_back, total_loss, TrainConfig
from irrm.wavelet import haar_forward, residual_recompose

RNG = np.random.default_rng(11)


def rand(*shape):
    return Tensor(RNG.uniform(0, 1, shape))


def random_irb(mode, kind, seed, channels=3, hidden=8, strength=1.0):
    rng = np.random.default_rng(seed)
    return InvertibleResidualBlock(mode, channels, hidden, kind, 1.0, 0.2, rng,
                                   final_std=strength * _he_std(hidden, 0.2))


# -- enhanced blocks -------------------------------------------------------------------


@pytest.mark.parametrize("kind", EB_KINDS)
def test_fresh_eb_outputs_zero(kind):
    eb = EnhancedBlock(EbConfig(kind, 3, 16, 9), np.random.default_rng(0))
    out = eb(rand(2, 3, 8, 8))
    assert out.shape == (2, 9, 8, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def _identity_1x1(ch):
    return Tensor(np.eye(ch).reshape(ch, ch, 1, 1), requires_grad=True)


def test_rb_with_zero_body_passes_input_projection():
    rng = np.random.default_rng(1)
    x = rand(1, 4, 6, 6)
    rb = EnhancedBlock(EbConfig("RB", 4, 4, 4), rng)
    pcb = EnhancedBlock(EbConfig("PCB", 4, 4, 4), rng)
    for eb in (rb, pcb):
        eb.conv_in.weight = Tensor(rng.standard_normal((4, 4, 3, 3)), requires_grad=True)
        eb.conv_mid.weight = T.zeros((4, 4, 3, 3), requires_grad=True)
        eb.conv_out.weight = _identity_1x1(4)
    projection = T.leaky_relu(rb.conv_in(x), 0.2)
    np.testing.assert_allclose(rb(x).data, projection.data, atol=1e-6)
    pcb.conv_in.weight = rb.conv_in.weight
    np.testing.assert_array_equal(pcb(x).data, 0.0)


def test_pcb_and_rb_have_equal_parameter_counts():
    rng = np.random.default_rng(0)
    pcb = EnhancedBlock(EbConfig("PCB", 12, 32, 12), rng)
    rb = EnhancedBlock(EbConfig("RB", 12, 32, 12), rng)
    rbp = EnhancedBlock(EbConfig("RBPlus", 12, 32, 12), rng)
    assert count_params(pcb) == count_params(rb)
    assert count_params(rbp) < count_params(rb) / 2


def test_eb_channel_mismatch():
    eb = EnhancedBlock(EbConfig("RB", 3, 8, 9), np.random.default_rng(0))
    with pytest.raises(ValueError):
        eb(rand(1, 4, 4, 4))


def test_bad_kind_rejected():
    with pytest.raises(ValueError):
        EbConfig("ResNeXt", 3, 8, 3)


# -- coupling blocks -------------------------------------------------------------------------


def test_zero_init_three_eb_is_identity():
    irb = InvertibleResidualBlock("ThreeEb", 3, 8, "RB", 1.0, 0.2, np.random.default_rng(0))
    u1, u2 = rand(2, 9, 4, 4), rand(2, 3, 4, 4)
    v1, v2 = irb.forward(u1, u2)
    np.testing.assert_array_equal(v1.data, u1.data)
    np.testing.assert_array_equal(v2.data, u2.data)
    w1, w2 = irb.inverse(u1, u2)
    np.testing.assert_array_equal(w1.data, u1.data)
    np.testing.assert_array_equal(w2.data, u2.data)


def test_zero_init_literal_adds_one():
    irb = InvertibleResidualBlock("LiteralEq3", 3, 8, "RB", 1.0, 0.2, np.random.default_rng(0))
    u1, u2 = rand(1, 9, 4, 4), rand(1, 3, 4, 4)
    v1, v2 = irb.forward(u1, u2)
    np.testing.assert_allclose(v1.data, u1.data + 1, atol=1e-6)
    np.testing.assert_allclose(v2.data, u2.data + 1, atol=1e-6)


def test_eb_counts_per_mode():
    three = InvertibleResidualBlock("ThreeEb", 3, 8, "RB", 1.0, 0.2, np.random.default_rng(0))
    lit = InvertibleResidualBlock("LiteralEq3", 3, 8, "RB", 1.0, 0.2, np.random.default_rng(0))
    assert sum(isinstance(v, EnhancedBlock) for v in vars(three).values()) == 3
    assert sum(isinstance(v, EnhancedBlock) for v in vars(lit).values()) == 2


@pytest.mark.parametrize("mode", ["ThreeEb", "LiteralEq3"])
def test_random_irb_round_trips(mode):
    worst32 = worst64 = 0.0
    for seed in range(50):
        kind = EB_KINDS[seed % 3]
        irb = random_irb(mode, kind, seed)
        u1, u2 = RNG.uniform(0, 1, (1, 9, 6, 6)), RNG.uniform(0, 1, (1, 3, 6, 6))
        a, b = irb.inverse(*irb.forward(Tensor(u1), Tensor(u2)))
        worst32 = max(worst32, np.abs(a.data - u1).max(), np.abs(b.data - u2).max())
        with T.precision(np.float64):
            irb64 = random_irb(mode, kind, seed)
            a, b = irb64.inverse(*irb64.forward(Tensor(u1), Tensor(u2)))
            worst64 = max(worst64, np.abs(a.data - u1).max(), np.abs(b.data - u2).max())
    assert worst32 <= 1e-5
    assert worst64 <= 1e-10


@pytest.mark.parametrize("mode", ["ThreeEb", "LiteralEq3"])
def test_stack_of_eight_irbs(mode):
    # float32 error scales with activation magnitude, which grows with weight scale
    stack = [random_irb(mode, "RB", s, strength=0.1) for s in range(8)]
    u1, u2 = rand(2, 9, 8, 8), rand(2, 3, 8, 8)
    a, b = u1, u2
    for irb in stack:
        a, b = irb.forward(a, b)
    for irb in reversed(stack):
        a, b = irb.inverse(a, b)
    assert np.abs(a.data - u1.data).max() <= 1e-4
    assert np.abs(b.data - u2.data).max() <= 1e-4


def test_irb_shape_check():
    irb = random_irb("ThreeEb", "RB", 0)
    with pytest.raises(ValueError):
        irb.forward(rand(1, 6, 4, 4), rand(1, 3, 4, 4))


def test_scale_is_clamped():
    irb = random_irb("ThreeEb", "RB", 0, strength=100.0)
    u2 = rand(1, 3, 4, 4)
    s = np.exp(np.tanh(irb.eb2(u2).data))
    assert s.min() >= np.exp(-1) - 1e-6 and s.max() <= np.exp(1) + 1e-6


# -- residual downscaling modules -------------------------------------------------------------


def test_zero_init_rdm_is_pool_and_bands():
    rdm = ResidualDownscalingModule(ModelConfig(), np.random.default_rng(0))
    x = rand(2, 3, 8, 8)
    y, z = rdm.forward(x)
    np.testing.assert_allclose(y.data, T.avg_pool2(x).data, atol=1e-7)
    np.testing.assert_allclose(z.data, haar_forward(x).high.data, atol=1e-6)
    assert y.size + z.size == x.size
    np.testing.assert_allclose(rdm.inverse(y, z).data, x.data, atol=1e-6)
    blur = rdm.inverse(y, T.zeros(z.shape))
    np.testing.assert_allclose(blur.data, residual_recompose(y, T.zeros(z.shape)).data, atol=1e-7)
    np.testing.assert_allclose(blur.data, T.nearest_up2(y).data, atol=1e-6)


@pytest.mark.parametrize("long_skip", [True, False])
def test_random_rdm_round_trip(long_skip):
    m = IRRM(ModelConfig(hidden_channels=8, long_skip=long_skip), seed=3, init="random")
    x = rand(1, 3, 16, 16)
    y, z = m.rdms[0].forward(x)
    assert np.abs(m.rdms[0].inverse(y, z).data - x.data).max() <= 1e-4


def test_rdm_inverse_shape_error():
    rdm = ResidualDownscalingModule(ModelConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        rdm.inverse(rand(1, 3, 4, 4), rand(1, 9, 4, 2))


# -- full model -----------------------------------------------------------------------------------


def test_x4_shape_law_and_conservation():
    m = IRRM(ModelConfig(scale=4, hidden_channels=8))
    x = rand(1, 3, 64, 64)
    y, z = model_forward(m, x)
    assert y.shape == (1, 3, 16, 16)
    assert z.shapes == [(1, 9, 32, 32), (1, 9, 16, 16)]
    assert y.size + sum(level.size for level in z) == 12288 == 768 + 9216 + 2304


def test_divisibility_error_suggests_padding():
    m = IRRM(ModelConfig(scale=4, hidden_channels=8))
    with pytest.raises(ValueError, match=r"pad by \(2, 0\)"):
        m.forward(rand(1, 3, 18, 16))


def test_inverse_rejects_bad_pyramids():
    m = IRRM(ModelConfig(scale=4, hidden_channels=8))
    y = rand(1, 3, 4, 4)
    with pytest.raises(ValueError, match="levels"):
        model_inverse(m, y, LatentPyramid([rand(1, 9, 8, 8)]))
    with pytest.raises(ValueError, match="level 1"):
        model_inverse(m, y, LatentPyramid([rand(1, 9, 4, 4), rand(1, 9, 4, 4)]))


def test_model_round_trip_both_precisions():
    cfg = ModelConfig(scale=4, hidden_channels=8, irbs_per_rdm=2, coupling_mode="LiteralEq3")
    x = RNG.uniform(0, 1, (2, 3, 16, 16))
    m = IRRM(cfg, seed=5, init="random")
    assert np.abs(m.inverse(*m.forward(Tensor(x))).data - x).max() <= 1e-4
    with T.precision(np.float64):
        m = IRRM(cfg, seed=5, init="random")
        assert np.abs(m.inverse(*m.forward(Tensor(x))).data - x).max() <= 1e-9


@settings(max_examples=12, deadline=None)
@given(mode=st.sampled_from(["ThreeEb", "LiteralEq3"]), kind=st.sampled_from(EB_KINDS),
       irbs=st.integers(1, 3), scale=st.sampled_from([2, 4]), seed=st.integers(0, 1000),
       long_skip=st.booleans())
def test_bijectivity_property(mode, kind, irbs, scale, seed, long_skip):
    cfg = ModelConfig(scale=scale, irbs_per_rdm=irbs, hidden_channels=8, eb_kind=kind, coupling_mode=mode,
                      long_skip=long_skip)
    x = np.random.default_rng(seed).uniform(0, 1, (1, 3, 8, 8))
    with T.precision(np.float64):
        m = IRRM(cfg, seed=seed, init="random")
        y, z = m.forward(Tensor(x))
        assert np.all(np.isfinite(y.data))
        assert np.abs(m.inverse(y, z).data - x).max() <= 1e-9


def test_gradient_reaches_first_layer():
    m = IRRM(ModelConfig(irbs_per_rdm=2, hidden_channels=8), seed=0, init="random")
    x = rand(2, 3, 8, 8)
    z = sample_latents(m, 2, 8, 8, 1.0, seed=0)
    loss, _ = total_loss(m, x, T.avg_pool2(x), z, TrainConfig())
    loss.backward()
    g = m.rdms[0].irbs[0].eb1.conv_in.weight.grad
    assert g is not None and np.abs(g).max() > 0
    assert all(np.all(np.isfinite(p.grad)) for p in m.parameters())


def test_model_is_deterministic_under_seed():
    a = IRRM(ModelConfig(hidden_channels=8), seed=9, init="random")
    b = IRRM(ModelConfig(hidden_channels=8), seed=9, init="random")
    x = rand(1, 3, 8, 8)
    assert a.forward(x)[0].data.tobytes() == b.forward(x)[0].data.tobytes()


# -- latents ----------------------------------------------------------------------------------------


def test_sample_latents():
    m = IRRM(ModelConfig(scale=4, hidden_channels=8))
    zero = sample_latents(m, 2, 16, 16, 0.0, seed=1)
    assert zero.shapes == [(2, 9, 8, 8), (2, 9, 4, 4)]
    assert all(np.all(level.data == 0) for level in zero)
    a = sample_latents(m, 2, 16, 16, 0.7, seed=1)
    b = sample_latents(m, 2, 16, 16, 0.7, seed=1)
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a, b))
    big = sample_latents(IRRM(ModelConfig(hidden_channels=8)), 10, 200, 200, 0.5, seed=2)
    v = np.var(big[0].data.astype(np.float64))
    assert big[0].size >= 1e5
    assert abs(v - 0.25) / 0.25 < 0.02
    with pytest.raises(ValueError):
        sample_latents(m, 1, 8, 8, -1.0)


def test_sigma_zero_equals_zero_latent_path():
    m = IRRM(ModelConfig(hidden_channels=8), seed=1, init="random")
    y, _ = m.forward(rand(1, 3, 8, 8))
    a = m.inverse(y, sample_latents(m, 1, 8, 8, 0.0, seed=5))
    b = m.inverse(y, LatentPyramid([T.zeros((1, 9, 4, 4))]))
    assert a.data.tobytes() == b.data.tobytes()


# -- bookkeeping ---------------------------------------------------------------------------------------


def test_single_conv_count():
    assert count_params(Conv2d(4, 8, np.random.default_rng(0))) == 296


def test_zero_layer_model_has_no_parameters():
    m = IRRM(ModelConfig(irbs_per_rdm=0))
    assert count_params(m) == 0
    x = rand(1, 3, 4, 4)
    np.testing.assert_allclose(m.inverse(*m.forward(x)).data, x.data, atol=1e-6)


@pytest.mark.parametrize("preset", sorted(PRESETS))
def test_count_matches_describe(preset):
    m = IRRM(ModelConfig.preset(preset, scale=4))
    rows = describe(m)
    assert count_params(m) == sum(r["count"] for r in rows)
    assert all(int(np.prod(r["shape"])) == r["count"] for r in rows)


def test_preset_ordering():
    counts = [count_params(IRRM(ModelConfig.preset(p))) for p in ("S", "M", "L")]
    assert counts[0] < counts[1] < counts[2]
    with pytest.raises(ValueError):
        ModelConfig.preset("XL")


def test_macs_hand_count():
    # one RDM, one ThreeEb IRB, hidden 4, PCB: count every conv by hand
    m = IRRM(ModelConfig(irbs_per_rdm=1, hidden_channels=4, eb_kind="PCB"))
    per_lr_pixel = 0
    for i, o in ((9, 3), (3, 9), (3, 9)):  # eb1, eb2, eb3
        per_lr_pixel += i * 4 * 9 + 4 * 4 * 9 + 4 * o
    assert macs_per_pixel(m) == pytest.approx(per_lr_pixel / 4)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(scale=3)
    with pytest.raises(ValueError):
        ModelConfig(coupling_mode="Glow")
    with pytest.raises(ValueError):
        ModelConfig(clamp_alpha=0)


def test_state_dict_round_trip_and_mismatch():
    a = IRRM(ModelConfig(hidden_channels=8), seed=1, init="random")
    b = IRRM(ModelConfig(hidden_channels=8), seed=2, init="random")
    b.load_state_dict(a.state_dict())
    x = rand(1, 3, 8, 8)
    assert a.forward(x)[0].data.tobytes() == b.forward(x)[0].data.tobytes()
    state = a.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        b.load_state_dict(state)


def test_loss_back_on_identity_model_with_true_latents():
    m = IRRM(ModelConfig(scale=4, hidden_channels=8))
    x = rand(1, 3, 16, 16)
    y, z = m.forward(x)
    assert loss_back(m.inverse(y, z), x).item() <= 1e-6

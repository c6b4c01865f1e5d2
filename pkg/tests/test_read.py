import numpy as np
import pytest

from read_forge import tensor as T
from read_forge.backbone import Backbone, BackboneCache, backbone_forward, load_preset
from read_forge.errors import CacheError, ConfigError
from read_forge.petl import MethodSpec, apply_method
from read_forge.read import (
    GATES,
    ReadConfig,
    cell_step,
    count_read_parameters,
    decoder_corrections,
    encoder_corrections,
    init_read,
    trainable_param_count,
    zero_state,
)


def expected_count(rnn, h, d):
    g = GATES[rnn]
    per_side = d * g * h + h * g * h + 2 * g * h
    return 2 * per_side + h * g * h + h * d


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def _cache(enc, dec=None, sigma=None):
    enc = [T.Tensor(np.zeros_like(enc[0]))] + [T.Tensor(e) for e in enc]
    dec = [] if dec is None else [T.Tensor(np.zeros_like(dec[0]))] + [T.Tensor(x) for x in dec]
    sigma = [] if sigma is None else [T.Tensor(s) for s in sigma]
    B, m = enc[1].shape[:2]
    n = dec[1].shape[1] if dec else 1
    return BackboneCache(enc, dec, sigma, [], np.ones((B, m), bool), np.ones((B, n), bool),
                         enc[-1], frozen=True)


class TestCounts:
    def test_gru_256_on_base_dims(self):
        assert count_read_parameters(ReadConfig("gru", 256), 768) == 1_969_152
        assert count_read_parameters(ReadConfig("gru", 256), 768) == expected_count("gru", 256, 768)

    def test_target_band(self):
        n = count_read_parameters(ReadConfig("gru", 256), 768)
        assert abs(n - 1.97e6) <= 0.15 * 1.97e6

    def test_vanilla_hand_count(self):
        # per side: w_ih 2x2, w_hh 2x2, two biases of 2; plus psi 2x2 and out 2x2
        assert count_read_parameters(ReadConfig("vanilla", 2), 2) == 2 * (4 + 4 + 2 + 2) + 4 + 4 == 32

    @pytest.mark.parametrize("rnn", sorted(GATES))
    @pytest.mark.parametrize("h", [1, 7, 128])
    def test_formula(self, rnn, h):
        assert count_read_parameters(ReadConfig(rnn, h), 32) == expected_count(rnn, h, 32)

    def test_depth_independent(self):
        cfg = ReadConfig("gru", 16)
        shallow = init_read(cfg, load_preset("tiny").with_depth(2), seed=0)
        deep = init_read(cfg, load_preset("tiny").with_depth(6), seed=0)
        assert trainable_param_count(shallow) == trainable_param_count(deep)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ReadConfig("transformer", 8)
        with pytest.raises(ConfigError):
            ReadConfig("gru", 0)


class TestRecursion:
    @pytest.mark.parametrize("rnn", ["vanilla", "gru"])
    def test_zero_inputs_stay_zero(self, rnn):
        params = init_read(ReadConfig(rnn, 5), load_preset("tiny"), seed=1)
        cache = _cache([np.zeros((2, 3, 32))] * 2)
        np.testing.assert_array_equal(encoder_corrections(cache, params).data, np.zeros((2, 3, 5)))

    @pytest.mark.parametrize("rnn", ["vanilla", "gru", "lstm"])
    def test_single_step_matches_hand_cell(self, rnn):
        rng = np.random.default_rng(0)
        params = init_read(ReadConfig(rnn, 4), load_preset("tiny"), seed=2)
        for t in params.tensors.values():
            t.data = rng.standard_normal(t.shape)
        phi = rng.standard_normal((1, 1, 32))
        got = encoder_corrections(_cache([phi]), params).data
        p = {k.split(".", 2)[-1]: v.data for k, v in params.tensors.items() if k.startswith("read.enc.")}
        gi = phi @ p["w_ih"] + p["b_ih"]
        gh = p["b_hh"]  # zero initial state
        h = 4
        if rnn == "vanilla":
            want = np.tanh(gi + gh)
        elif rnn == "gru":
            r, z = _sig(gi[..., :h] + gh[:h]), _sig(gi[..., h:2 * h] + gh[h:2 * h])
            n = np.tanh(gi[..., 2 * h:] + r * gh[2 * h:])
            want = (1 - z) * n
        else:
            a = gi + gh
            i, g, o = _sig(a[..., :h]), np.tanh(a[..., 2 * h:3 * h]), _sig(a[..., 3 * h:])
            want = o * np.tanh(i * g)
        np.testing.assert_allclose(got, want, rtol=1e-13)

    def test_zero_encoder_state_decouples_decoder(self):
        rng = np.random.default_rng(3)
        params = init_read(ReadConfig("gru", 6), load_preset("tiny"), seed=0)
        dec = [rng.standard_normal((1, 2, 32)) for _ in range(2)]
        sigma = [np.full((1, 2, 3), 1 / 3)] * 2
        cache = _cache([np.zeros((1, 3, 32))] * 2, dec, sigma)
        h_enc = T.Tensor(np.zeros((1, 3, 6)))
        got = decoder_corrections(cache, h_enc, params).data
        state = zero_state(params.config, (1, 2))
        for x in dec:
            state = cell_step(params, "dec", T.Tensor(x), state)
        np.testing.assert_array_equal(got, state.data)

    def test_one_hot_attention_picks_one_source(self):
        rng = np.random.default_rng(4)
        params = init_read(ReadConfig("vanilla", 3), load_preset("tiny"), seed=0)
        dec = [rng.standard_normal((1, 1, 32))]
        sigma = [np.array([[[0.0, 1.0, 0.0]]])]
        cache = _cache([np.zeros((1, 3, 32))], dec, sigma)
        h_enc = T.Tensor(rng.standard_normal((1, 3, 3)))
        got = decoder_corrections(cache, h_enc, params).data
        joined = h_enc.data[:, 1:2] @ params["read.psi"].data
        want = np.tanh(dec[0] @ params["read.dec.w_ih"].data + joined)
        np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_sigma_mismatch(self):
        params = init_read(ReadConfig("gru", 4), load_preset("tiny"), seed=0)
        cache = _cache([np.zeros((1, 3, 32))], [np.zeros((1, 2, 32))], [np.ones((1, 2, 4)) / 4])
        with pytest.raises(CacheError):
            decoder_corrections(cache, T.Tensor(np.zeros((1, 3, 4))), params)

    def test_missing_layers(self):
        params = init_read(ReadConfig("gru", 4), load_preset("tiny"), seed=0)
        cache = _cache([np.zeros((1, 3, 32))])
        cache.enc_hidden = cache.enc_hidden[:1]
        with pytest.raises(CacheError):
            encoder_corrections(cache, params)


@pytest.mark.parametrize("rnn", sorted(GATES))
def test_zero_init_is_transparent(tiny_backbone, small_batch, rnn):
    X, Y = small_batch
    model = apply_method(tiny_backbone, MethodSpec("read", read=ReadConfig(rnn, 8)), seed=5)
    base, _ = backbone_forward(X, Y, tiny_backbone)
    assert np.array_equal(model.logits(X, Y).data, base.data)


def test_only_side_network_trains(tiny_backbone, small_batch):
    X, Y = small_batch
    model = apply_method(tiny_backbone, MethodSpec("read", read=ReadConfig("gru", 8)), seed=0)
    assert set(model.trainable()) == {n for n in model.trainable() if n.startswith("read.")}
    tape = T.Tape()
    with tape:
        loss = model.loss(X, Y, Y)
    grads = T.backward(tape, loss).by_name()
    assert set(grads) <= set(model.trainable())
    assert np.any(grads["read.out"])  # the only path at zero init

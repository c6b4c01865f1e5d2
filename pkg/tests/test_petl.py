import numpy as np
import pytest

from read_forge import tensor as T
from read_forge.backbone import backbone_forward, count_parameters, load_preset
from read_forge.errors import ConfigError
from read_forge.petl import (
    MethodSpec,
    adapter_targets,
    apply_method,
    count_method_parameters,
    lora_targets,
    trainable_fraction,
)
from read_forge.read import ReadConfig

TINY_METHODS = [
    MethodSpec("lora", rank=4),
    MethodSpec("adapter", bottleneck=8),
    MethodSpec("bitfit"),
    MethodSpec("prompt", prompt_len=3),
    MethodSpec("full"),
    MethodSpec("read", read=ReadConfig("gru", 8)),
]


class TestCounts:
    def test_lora_per_matrix(self, tiny_config):
        trainable, _ = count_method_parameters(tiny_config, MethodSpec("lora", rank=4))
        assert len(lora_targets(tiny_config)) == 8  # q and v in 2 encoder + 2 decoder self-attentions
        assert trainable == 8 * 256

    def test_adapter_per_block(self, tiny_config):
        trainable, _ = count_method_parameters(tiny_config, MethodSpec("adapter", bottleneck=8))
        assert 32 * 8 + 8 + 8 * 32 + 32 == 552
        assert len(adapter_targets(tiny_config)) == 2 * 2 + 2 * 3
        assert trainable == 10 * 552

    def test_full_is_everything(self, tiny_config):
        trainable, total = count_method_parameters(tiny_config, MethodSpec("full"))
        assert trainable == total == count_parameters(tiny_config)

    def test_bitfit_on_base_matches_reference_scale(self):
        trainable, total = count_method_parameters(load_preset("t5_base_like"), MethodSpec("bitfit"))
        assert trainable == 139_776
        assert 100 * trainable / total == pytest.approx(0.06, abs=0.01)

    @pytest.mark.xfail(strict=True, reason="tiny dims put 768 of 47,232 weights in biases (1.63%)")
    def test_bitfit_tiny_fraction_below_half_percent(self, tiny_config):
        trainable, total = count_method_parameters(tiny_config, MethodSpec("bitfit"))
        assert 100 * trainable / total < 0.5

    def test_read_on_base(self):
        trainable, total = count_method_parameters(load_preset("t5_base_like"),
                                                   MethodSpec("read", read=ReadConfig("gru", 256)))
        assert trainable == 1_969_152
        assert 0.6 <= 100 * trainable / total <= 1.0

    @pytest.mark.xfail(strict=True, reason="q/v LoRA on encoder and decoder self-attention gives 0.95%")
    def test_lora_32_on_base_reference_fraction(self):
        trainable, total = count_method_parameters(load_preset("t5_base_like"), MethodSpec("lora", rank=32))
        assert 100 * trainable / total == pytest.approx(0.48, abs=0.2)

    def test_lora_32_on_base_measured(self):
        trainable, total = count_method_parameters(load_preset("t5_base_like"), MethodSpec("lora", rank=32))
        assert trainable == 48 * 2 * 768 * 32
        assert total == 248_503_296 + trainable
        assert 100 * trainable / total == pytest.approx(0.94047, abs=1e-5)

    @pytest.mark.parametrize("spec", TINY_METHODS, ids=lambda s: s.label)
    def test_counts_match_built_models(self, tiny_backbone, spec):
        model = apply_method(tiny_backbone, spec, seed=0)
        assert (model.trainable_count(), model.total_count()) == count_method_parameters(
            tiny_backbone.config, spec)

    def test_full_fraction(self, tiny_backbone):
        assert trainable_fraction(apply_method(tiny_backbone, MethodSpec("full"))) == 100.0


class TestTransparency:
    @pytest.mark.parametrize("spec", [MethodSpec("lora", rank=4), MethodSpec("adapter", bottleneck=8),
                                      MethodSpec("bitfit"), MethodSpec("full")], ids=lambda s: s.label)
    def test_zero_init_matches_backbone(self, tiny_backbone, small_batch, spec):
        X, Y = small_batch
        base, _ = backbone_forward(X, Y, tiny_backbone)
        assert np.array_equal(apply_method(tiny_backbone, spec, seed=3).logits(X, Y).data, base.data)

    def test_prompt_changes_output(self, tiny_backbone, small_batch):
        X, Y = small_batch
        base, _ = backbone_forward(X, Y, tiny_backbone)
        out = apply_method(tiny_backbone, MethodSpec("prompt", prompt_len=2)).logits(X, Y)
        assert out.shape == base.shape and not np.array_equal(out.data, base.data)

    def test_backbone_weights_untouched(self, tiny_backbone, small_batch):
        X, Y = small_batch
        before = {k: v.data.copy() for k, v in tiny_backbone.params.items()}
        model = apply_method(tiny_backbone, MethodSpec("lora", rank=2))
        tape = T.Tape()
        with tape:
            loss = model.loss(X, Y, Y)
        grads = T.backward(tape, loss).by_name()
        assert all(name.startswith("lora.") for name in grads)
        for k, v in tiny_backbone.params.items():
            assert np.array_equal(v.data, before[k])


class TestMethodSpec:
    @pytest.mark.parametrize("kwargs", [
        {"kind": "lora"},
        {"kind": "lora", "rank": 0},
        {"kind": "adapter", "rank": 8},
        {"kind": "bitfit", "prompt_len": 3},
        {"kind": "dora"},
        {"kind": "full", "read": ReadConfig()},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            MethodSpec(**kwargs)

    def test_round_trip(self):
        for spec in TINY_METHODS:
            assert MethodSpec.from_dict(spec.to_dict()) == spec

    def test_labels_and_canonical(self):
        assert MethodSpec("lora", rank=8).label == "lora-8"
        assert MethodSpec("lora", rank=8).canonical and not MethodSpec("lora", rank=4).canonical
        assert MethodSpec("read").label == "read-gru-256" and MethodSpec("read").canonical

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            MethodSpec.from_dict({"kind": "full", "alpha": 1})

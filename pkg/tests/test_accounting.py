import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from read_forge.accounting import (
    EnergyTrace,
    bench_batch,
    cost_report,
    depth_sweep,
    estimate_energy,
    format_table,
    is_exactly_linear,
    measure_step_memory,
    reports_to_json,
)
from read_forge.backbone import Backbone
from read_forge.errors import ConfigError, TraceError
from read_forge.petl import MethodSpec, PetlModel, apply_method
from read_forge.backbone import ForwardHooks
from read_forge.read import ReadConfig


class TestEnergy:
    def test_full_utilisation_two_hours(self):
        trace = EnergyTrace([100.0] * 120, power_kw=0.25)
        assert trace.hours == 2.0
        assert abs(estimate_energy(trace) - 0.5) <= 1e-12

    def test_half_utilisation_one_hour(self):
        assert abs(estimate_energy(EnergyTrace([50.0] * 60)) - 0.125) <= 1e-12

    def test_idle(self):
        assert estimate_energy(EnergyTrace([0.0] * 30)) == 0.0

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=300), st.floats(0, 10))
    def test_matches_sum_formula(self, samples, power):
        got = estimate_energy(EnergyTrace(samples, power))
        assert got == pytest.approx(sum(samples) * power / 6000, rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("samples", [[], [101.0], [-0.5], [float("nan")]])
    def test_rejects_bad_samples(self, samples):
        with pytest.raises(TraceError):
            EnergyTrace(samples)

    def test_csv_round_trip(self, tmp_path):
        trace = EnergyTrace([10.0, 55.5, 100.0])
        path = tmp_path / "trace.csv"
        path.write_text(trace.to_csv())
        assert path.read_text().splitlines()[0] == "minute,utilization_percent"
        assert EnergyTrace.from_csv(path) == trace

    @pytest.mark.parametrize("rows", [
        [["minute", "util"], ["0", "5"]],
        [["minute", "utilization_percent"], ["1", "5"]],
        [["minute", "utilization_percent"], ["0", "x"]],
        [["minute", "utilization_percent"], ["0", "5", "6"]],
        [["minute", "utilization_percent"]],
    ])
    def test_malformed_csv(self, rows):
        with pytest.raises(TraceError):
            EnergyTrace.from_rows(rows)


class TestMemory:
    def test_frozen_model_has_no_tape(self, tiny_backbone):
        model = PetlModel("frozen", tiny_backbone.with_trainable(lambda n: False), {}, ForwardHooks())
        assert measure_step_memory(model, bench_batch(tiny_backbone.config, 4)).tape_bytes == 0

    def test_batch_doubling(self, tiny_backbone):
        model = apply_method(tiny_backbone, MethodSpec("full"))
        one = measure_step_memory(model, bench_batch(tiny_backbone.config, 32)).tape_bytes
        two = measure_step_memory(model, bench_batch(tiny_backbone.config, 64)).tape_bytes
        assert two / one == pytest.approx(2.0, rel=0.01)

    @pytest.mark.parametrize("hidden", [16, 32])
    def test_read_below_full_on_tiny(self, tiny_backbone, hidden):
        batch = bench_batch(tiny_backbone.config, 32)
        full = cost_report(tiny_backbone, MethodSpec("full"), batch)
        read = cost_report(tiny_backbone, MethodSpec("read", read=ReadConfig("gru", hidden)), batch)
        assert read.tape_bytes < full.tape_bytes
        assert read.cache_bytes > 0 and full.cache_bytes == 0

    def test_frozen_measurements(self, tiny_backbone):
        batch = bench_batch(tiny_backbone.config, 32)
        assert cost_report(tiny_backbone, MethodSpec("full"), batch).tape_bytes == 4_451_376
        read = cost_report(tiny_backbone, MethodSpec("read", read=ReadConfig("gru", 32)), batch)
        assert (read.tape_bytes, read.cache_bytes) == (1_739_520, 336_384)

    def test_deterministic(self, tiny_backbone):
        batch = bench_batch(tiny_backbone.config, 8)
        spec = MethodSpec("read", read=ReadConfig("lstm", 8))
        assert cost_report(tiny_backbone, spec, batch) == cost_report(tiny_backbone, spec, batch)

    def test_bench_batch_validation(self, tiny_config):
        with pytest.raises(ConfigError):
            bench_batch(tiny_config, 0)


class TestReports:
    def test_shape_only_report(self, tiny_config):
        report = cost_report(tiny_config, MethodSpec("lora", rank=4))
        assert report.trainable_params == 2048 and report.tape_bytes is None

    def test_inference_bytes(self, tiny_backbone):
        batch = bench_batch(tiny_backbone.config, 4)
        r = cost_report(tiny_backbone, MethodSpec("read", read=ReadConfig("gru", 8)), batch)
        assert r.inference_bytes == 8 * r.total_params + r.cache_bytes

    def test_energy_attached(self, tiny_config):
        r = cost_report(tiny_config, MethodSpec("full"), trace=EnergyTrace([50.0] * 60))
        assert r.energy_kwh == pytest.approx(0.125, abs=1e-12)

    def test_invariants(self):
        from read_forge.accounting import CostReport
        with pytest.raises(ConfigError):
            CostReport("x", 10, 11, 110.0)
        with pytest.raises(ConfigError):
            CostReport("x", 10, 1, 10.0, tape_bytes=-1)

    def test_table_and_json(self, tiny_config):
        reports = [cost_report(tiny_config, MethodSpec("full")), cost_report(tiny_config, MethodSpec("bitfit"))]
        table = format_table([r.to_dict() for r in reports])
        assert table.splitlines()[0].startswith("method") and "47,232" in table and " - " in table
        assert [d["method"] for d in json.loads(reports_to_json(reports))] == ["full", "bitfit"]


class TestDepth:
    SPECS = [MethodSpec("read", read=ReadConfig("gru", 128)), MethodSpec("lora", rank=8),
             MethodSpec("adapter", bottleneck=32), MethodSpec("bitfit")]

    def test_read_constant_others_linear(self, tiny_config):
        rows = depth_sweep(tiny_config, self.SPECS, (2, 4, 6, 12))
        by = {s.label: [r.trainable_params for r in rows if r.method == s.label] for s in self.SPECS}
        assert len(set(by["read-gru-128"])) == 1
        for label in ("lora-8", "adapter-32", "bitfit"):
            assert is_exactly_linear((2, 4, 6, 12), by[label])
        assert by["lora-8"] == [4096, 8192, 12288, 24576]

    def test_linear_check(self):
        assert is_exactly_linear([1, 2, 4], [3, 5, 9])
        assert not is_exactly_linear([1, 2, 4], [3, 5, 10])
        assert not is_exactly_linear([1, 2], [5, 5])
        with pytest.raises(ConfigError):
            is_exactly_linear([1], [1])

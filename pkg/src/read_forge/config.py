"""JSON run configuration with dotted-path overrides.

Schema (every section optional except where noted)::

    {
      "mode": "verify" | "train" | "bench" | "report",
      "seed": 0,
      "preset": "tiny",                       # backbone preset name
      "backbone_overrides": {"encoder_layers": 4},
      "method": {"kind": "read", "read": {"rnn_type": "gru", "hidden_dim": 128}},
      "task": {"kind": "copy", "vocab_size": 16, "max_len": 8, ...},
      "train": {"lr": 0.003, "max_steps": 5000, ...},
      "lr_grid_size": null,                   # > 1 runs a log-grid search first
      "target_token_acc": null,               # train: exit 3 when test accuracy is lower
      "output_dir": "run",                    # relative to $READ_FORGE_OUTPUT
      "energy_trace": null, "power_kw": 0.25,
      "verify": {"grad_instances": 100, "composed_instances": 25, "eps_grid": [...]},
      "bench": {"methods": [...], "depths": [2, 4, 6, 12], "batch_size": 32,
                "src_len": 9, "tgt_len": 9, "measure_memory": true},
      "report": {"inputs": ["run_read", "run_full", "bench"]}
    }

Overrides use ``--set key.sub=value``; the value is parsed as JSON when
possible and kept as a string otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig, load_preset
from .corrections import DEFAULT_EPS_GRID
from .errors import ConfigError, ReadForgeError
from .petl import MethodSpec
from .tasks import TaskSpec
from .trainer import TrainConfig

MODES = ("verify", "train", "bench", "report")
OUTPUT_ENV = "READ_FORGE_OUTPUT"
DEFAULT_OUTPUT_ROOT = "outputs"


@dataclass(frozen=True)
class VerifyOptions:
    grad_instances: int = 100
    composed_instances: int = 25
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID


@dataclass(frozen=True)
class BenchOptions:
    methods: tuple[MethodSpec, ...] = (
        MethodSpec("read"), MethodSpec("lora", rank=8), MethodSpec("adapter", bottleneck=32),
        MethodSpec("bitfit"), MethodSpec("prompt", prompt_len=10), MethodSpec("full"),
    )
    depths: tuple[int, ...] = (2, 4, 6, 12)
    batch_size: int = 32
    src_len: int = 9
    tgt_len: int = 9
    measure_memory: bool = True


@dataclass(frozen=True)
class ReportOptions:
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train"
    seed: int = 0
    preset: str = "tiny"
    backbone_overrides: dict = field(default_factory=dict)
    method: MethodSpec = field(default_factory=lambda: MethodSpec("read"))
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    lr_grid_size: int | None = None
    target_token_acc: float | None = None
    output_dir: str = "run"
    energy_trace: str | None = None
    power_kw: float = 0.25
    verify: VerifyOptions = field(default_factory=VerifyOptions)
    bench: BenchOptions = field(default_factory=BenchOptions)
    report: ReportOptions = field(default_factory=ReportOptions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.lr_grid_size is not None and self.lr_grid_size < 2:
            raise ConfigError("lr_grid_size: must be >= 2")
        self.backbone_config()  # validates preset and overrides

    def backbone_config(self) -> BackboneConfig:
        try:
            return load_preset(self.preset, **self.backbone_overrides)
        except TypeError as exc:
            raise ConfigError(f"backbone_overrides: {exc}") from None

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        return out if out.is_absolute() else output_root() / out

    def to_dict(self) -> dict:
        data = asdict(self)
        data["method"] = self.method.to_dict()
        data["bench"]["methods"] = [m.to_dict() for m in self.bench.methods]
        return data


def output_root() -> Path:
    """Directory that relative output and report paths resolve against."""
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` assignment to a nested dict in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override key {key!r} is malformed")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = _parse_value(value)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {unknown}")
    try:
        return cls(**data)
    except ReadForgeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _method(data, path: str) -> MethodSpec:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    try:
        return MethodSpec.from_dict(data)
    except (ReadForgeError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}")
    if "method" in data:
        data["method"] = _method(data["method"], "method")
    if "task" in data:
        data["task"] = _build(TaskSpec, data["task"], "task")
    if "train" in data:
        data["train"] = _build(TrainConfig, data["train"], "train")
    if "verify" in data:
        v = dict(data["verify"]) if isinstance(data["verify"], dict) else data["verify"]
        if isinstance(v, dict) and "eps_grid" in v:
            v["eps_grid"] = tuple(float(e) for e in v["eps_grid"])
        data["verify"] = _build(VerifyOptions, v, "verify")
    if "bench" in data:
        b = dict(data["bench"]) if isinstance(data["bench"], dict) else data["bench"]
        if isinstance(b, dict):
            if "methods" in b:
                b["methods"] = tuple(_method(m, f"bench.methods[{i}]") for i, m in enumerate(b["methods"]))
            if "depths" in b:
                b["depths"] = tuple(int(d) for d in b["depths"])
        data["bench"] = _build(BenchOptions, b, "bench")
    if "report" in data:
        r = dict(data["report"]) if isinstance(data["report"], dict) else data["report"]
        if isinstance(r, dict) and "inputs" in r:
            r["inputs"] = tuple(r["inputs"])
        data["report"] = _build(ReportOptions, r, "report")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: list[str] | tuple[str, ...] = (),
                mode: str | None = None) -> RunConfig:
    """Read a JSON config, apply overrides (and the command's mode), validate."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    for assignment in overrides:
        apply_override(data, assignment)
    if mode is not None:
        data["mode"] = mode
    return config_from_dict(data)

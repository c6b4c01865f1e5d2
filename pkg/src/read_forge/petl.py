"""Baseline fine-tuning methods on the shared backbone.

* ``full``: every backbone weight trains.
* ``lora``: ``x @ W + (x @ A) @ B`` on the self-attention query and value
  projections of every block; ``B`` starts at zero, scaling is 1.
* ``adapter``: ``out + relu(out @ down + b) @ up + c`` after every attention
  and FFN sub-block, before the residual add; ``up`` and ``c`` start at zero.
* ``bitfit``: only FFN biases and layer-norm shifts train.
* ``prompt``: learned vectors prepended to the encoder input embeddings.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .backbone import (
    Backbone,
    BackboneConfig,
    ForwardHooks,
    count_parameters,
    is_bias,
    parameter_shapes,
)
from .errors import ConfigError
from .read import ReadConfig, ReadModel, count_read_parameters, init_read
from .tensor import Tensor
from .tunable import TunableModel

KINDS = ("full", "lora", "adapter", "bitfit", "prompt", "read")
CANONICAL = {"rank": (8, 32), "bottleneck": (32, 64), "prompt_len": (10, 20, 30)}
_OPTION_FOR = {"lora": "rank", "adapter": "bottleneck", "prompt": "prompt_len"}

PROMPT_INIT_STD = 0.5


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    rank: int | None = None
    bottleneck: int | None = None
    prompt_len: int | None = None
    read: ReadConfig | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {KINDS}")
        for option in ("rank", "bottleneck", "prompt_len"):
            value = getattr(self, option)
            relevant = _OPTION_FOR.get(self.kind) == option
            if relevant and (value is None or value < 1):
                raise ConfigError(f"{self.kind} needs a positive {option}")
            if not relevant and value is not None:
                raise ConfigError(f"{option} is not an option of {self.kind}")
        if self.kind == "read" and self.read is None:
            object.__setattr__(self, "read", ReadConfig())
        if self.kind != "read" and self.read is not None:
            raise ConfigError(f"read config given for method {self.kind}")

    @property
    def canonical(self) -> bool:
        option = _OPTION_FOR.get(self.kind)
        if option is not None:
            return getattr(self, option) in CANONICAL[option]
        if self.kind == "read":
            return self.read.canonical
        return True

    @property
    def label(self) -> str:
        option = _OPTION_FOR.get(self.kind)
        if option:
            return f"{self.kind}-{getattr(self, option)}"
        if self.kind == "read":
            return f"read-{self.read.rnn_type}-{self.read.hidden_dim}"
        return self.kind

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MethodSpec":
        data = dict(data)
        unknown = set(data) - {"kind", "rank", "bottleneck", "prompt_len", "read"}
        if unknown:
            raise ConfigError(f"unknown method fields: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigError("method.kind is required")
        if isinstance(data.get("read"), dict):
            data["read"] = ReadConfig(**data["read"])
        return cls(**data)


# ---------------------------------------------------------------------------
# Hooks
# ---------------------------------------------------------------------------


class LoraHooks(ForwardHooks):
    def __init__(self, factors: dict[str, tuple[Tensor, Tensor]], scale: float = 1.0):
        self.factors = factors
        self.scale = scale

    def linear(self, name, x, w):
        out = x @ w
        pair = self.factors.get(name)
        if pair is None:
            return out
        low = (x @ pair[0]) @ pair[1]
        return out + (low if self.scale == 1.0 else low * self.scale)


def adapter_block(x: Tensor, block: dict[str, Tensor]) -> Tensor:
    return T.relu(x @ block["down"] + block["b_down"]) @ block["up"] + block["b_up"]


class AdapterHooks(ForwardHooks):
    def __init__(self, blocks: dict[str, dict[str, Tensor]]):
        self.blocks = blocks

    def sublayer(self, name, out):
        block = self.blocks.get(name)
        return out if block is None else out + adapter_block(out, block)


class PromptHooks(ForwardHooks):
    def __init__(self, prompt: Tensor):
        self.prompt = prompt

    def encoder_embeddings(self, emb, mask):
        B = emb.shape[0]
        P = self.prompt.shape[0]
        tiled = self.prompt + np.zeros((B, P, self.prompt.shape[1]))
        return T.concat([tiled, emb], axis=1), np.concatenate([np.ones((B, P), bool), mask], axis=1)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class PetlModel(TunableModel):
    def __init__(self, method: str, backbone: Backbone, extra: dict[str, Tensor], hooks: ForwardHooks):
        super().__init__(backbone, extra)
        self.method = method
        self.hooks = hooks

    def logits(self, X, Y, src_mask=None, tgt_mask=None) -> Tensor:
        return self.backbone.run(X, Y, hooks=self.hooks, src_mask=src_mask, tgt_mask=tgt_mask)[0]


def lora_targets(cfg: BackboneConfig) -> list[str]:
    names = []
    for i in range(cfg.encoder_layers):
        names += [f"encoder.{i}.attn.q", f"encoder.{i}.attn.v"]
    for j in range(cfg.decoder_layers):
        names += [f"decoder.{j}.self.q", f"decoder.{j}.self.v"]
    return names


def adapter_targets(cfg: BackboneConfig) -> list[str]:
    names = []
    for i in range(cfg.encoder_layers):
        names += [f"encoder.{i}.attn", f"encoder.{i}.ffn"]
    for j in range(cfg.decoder_layers):
        names += [f"decoder.{j}.self", f"decoder.{j}.cross", f"decoder.{j}.ffn"]
    return names


def make_lora(cfg: BackboneConfig, rank: int, rng: np.random.Generator, targets=None,
              up_scale: float = 0.0) -> dict[str, tuple[Tensor, Tensor]]:
    """Factor pairs per target weight; ``up_scale`` 0 gives the transparent start."""
    shapes = parameter_shapes(cfg)
    factors = {}
    for name in targets if targets is not None else lora_targets(cfg):
        n_in, n_out = shapes[name]
        A = T.parameter(rng.standard_normal((n_in, rank)) / np.sqrt(n_in), name=f"lora.{name}.A")
        B = T.parameter(up_scale * rng.standard_normal((rank, n_out)) / np.sqrt(rank), name=f"lora.{name}.B")
        factors[name] = (A, B)
    return factors


def make_adapters(cfg: BackboneConfig, bottleneck: int, rng: np.random.Generator, targets=None,
                  up_scale: float = 0.0) -> dict[str, dict[str, Tensor]]:
    d = cfg.model_dim
    blocks = {}
    for name in targets if targets is not None else adapter_targets(cfg):
        blocks[name] = {
            "down": T.parameter(rng.standard_normal((d, bottleneck)) / np.sqrt(d), name=f"adapter.{name}.down"),
            "b_down": T.parameter(np.zeros(bottleneck), name=f"adapter.{name}.b_down"),
            "up": T.parameter(up_scale * rng.standard_normal((bottleneck, d)) / np.sqrt(bottleneck),
                              name=f"adapter.{name}.up"),
            "b_up": T.parameter(np.zeros(d), name=f"adapter.{name}.b_up"),
        }
    return blocks


def apply_method(backbone: Backbone, spec: MethodSpec, seed: int = 0) -> TunableModel:
    """Wrap ``backbone`` (weights shared, never modified) for fine-tuning with ``spec``."""
    cfg = backbone.config
    rng = np.random.default_rng(seed)
    frozen = backbone.with_trainable(lambda name: False)
    if spec.kind == "full":
        return PetlModel("full", backbone.with_trainable(lambda name: True), {}, ForwardHooks())
    if spec.kind == "bitfit":
        return PetlModel("bitfit", backbone.with_trainable(is_bias), {}, ForwardHooks())
    if spec.kind == "lora":
        factors = make_lora(cfg, spec.rank, rng)
        extra = {t.name: t for pair in factors.values() for t in pair}
        return PetlModel("lora", frozen, extra, LoraHooks(factors))
    if spec.kind == "adapter":
        blocks = make_adapters(cfg, spec.bottleneck, rng)
        extra = {t.name: t for block in blocks.values() for t in block.values()}
        return PetlModel("adapter", frozen, extra, AdapterHooks(blocks))
    if spec.kind == "prompt":
        prompt = T.parameter(PROMPT_INIT_STD * rng.standard_normal((spec.prompt_len, cfg.model_dim)),
                             name="prompt.embed")
        return PetlModel("prompt", frozen, {"prompt.embed": prompt}, PromptHooks(prompt))
    return ReadModel(backbone, init_read(spec.read, cfg, seed))


def trainable_fraction(model: TunableModel) -> float:
    return 100.0 * model.trainable_count() / model.total_count()


def count_method_parameters(cfg: BackboneConfig, spec: MethodSpec) -> tuple[int, int]:
    """(trainable, total) computed from shapes alone, without allocating weights."""
    base = count_parameters(cfg)
    d = cfg.model_dim
    if spec.kind == "full":
        return base, base
    if spec.kind == "bitfit":
        shapes = parameter_shapes(cfg)
        return sum(int(np.prod(s)) for n, s in shapes.items() if is_bias(n)), base
    if spec.kind == "lora":
        added = len(lora_targets(cfg)) * 2 * d * spec.rank
    elif spec.kind == "adapter":
        b = spec.bottleneck
        added = len(adapter_targets(cfg)) * (d * b + b + b * d + d)
    elif spec.kind == "prompt":
        added = spec.prompt_len * d
    else:
        added = count_read_parameters(spec.read, d)
    return added, base + added

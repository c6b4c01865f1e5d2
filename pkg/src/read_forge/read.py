"""Recurrent side network over backbone depth.

One encoder cell and one decoder cell are shared by every layer index, so
the parameter count does not depend on backbone depth. For each token the
encoder cell walks up the cached encoder states; the decoder cell walks up
the decoder states, each step also receiving the final encoder corrections
mixed by that layer's cross-attention scores::

    h_E[i]   = cell_E(phi_E[i], h_E[i-1])                  i = 1..N_E
    psi[j]   = sigma[j] @ (h_E[N_E] @ Psi)
    h_D[j]   = cell_D(phi_D[j] + psi[j], h_D[j-1])         j = 1..N_D
    logits   = head(phi_D[N_D] + h_D[N_D] @ P_out)

``Psi`` and ``P_out`` map the hidden size back to model width. ``P_out``
starts at zero so an untrained side network leaves the backbone untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneCache, BackboneConfig, backbone_forward
from .errors import CacheError, ConfigError
from .tensor import Tensor
from .tunable import TunableModel

GATES = {"vanilla": 1, "gru": 3, "lstm": 4}
CANONICAL_HIDDEN = (128, 256)


@dataclass(frozen=True)
class ReadConfig:
    rnn_type: str = "gru"
    hidden_dim: int = 256
    combine_mode: str = "additive"

    def __post_init__(self):
        if self.rnn_type not in GATES:
            raise ConfigError(f"rnn_type must be one of {sorted(GATES)}, got {self.rnn_type!r}")
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")
        if self.combine_mode != "additive":
            raise ConfigError("only additive combination is supported")

    @property
    def canonical(self) -> bool:
        return self.hidden_dim in CANONICAL_HIDDEN


def param_shapes(cfg: ReadConfig, model_dim: int) -> dict[str, tuple[int, ...]]:
    g, h, d = GATES[cfg.rnn_type], cfg.hidden_dim, model_dim
    shapes = {}
    for side in ("enc", "dec"):
        shapes[f"read.{side}.w_ih"] = (d, g * h)
        shapes[f"read.{side}.w_hh"] = (h, g * h)
        shapes[f"read.{side}.b_ih"] = (g * h,)
        shapes[f"read.{side}.b_hh"] = (g * h,)
    shapes["read.psi"] = (h, g * h)
    shapes["read.out"] = (h, d)
    return shapes


def count_read_parameters(cfg: ReadConfig, model_dim: int) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg, model_dim).values())


@dataclass
class ReadParams:
    config: ReadConfig
    model_dim: int
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_read(cfg: ReadConfig, backbone: BackboneConfig, seed: int = 0) -> ReadParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg, backbone.model_dim).items():
        if name == "read.out" or name.endswith((".b_ih", ".b_hh")):
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) / np.sqrt(shape[0])
        tensors[name] = T.parameter(data, name=name)
    return ReadParams(cfg, backbone.model_dim, tensors)


def trainable_param_count(params: ReadParams) -> int:
    return sum(t.size for t in params.tensors.values() if t.requires_grad)


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------


def zero_state(cfg: ReadConfig, shape: tuple[int, ...]):
    h = Tensor(np.zeros((*shape, cfg.hidden_dim)))
    if cfg.rnn_type == "lstm":
        return h, Tensor(np.zeros((*shape, cfg.hidden_dim)))
    return h


def state_h(state) -> Tensor:
    return state[0] if isinstance(state, tuple) else state


def cell_step(params: ReadParams, side: str, x: Tensor, state, joined: Tensor | None = None):
    """One recurrent step; gate layouts follow the usual (r, z, n) / (i, f, g, o) order.

    ``joined`` is added to the input-side gate pre-activations.
    """
    p = params.tensors
    kind, h = params.config.rnn_type, params.config.hidden_dim
    h_prev = state_h(state)
    gi = x @ p[f"read.{side}.w_ih"] + p[f"read.{side}.b_ih"]
    if joined is not None:
        gi = gi + joined
    gh = h_prev @ p[f"read.{side}.w_hh"] + p[f"read.{side}.b_hh"]
    if kind == "vanilla":
        return T.tanh(gi + gh)
    if kind == "gru":
        return T.gru_gates(gi, gh, h_prev)
    hc = T.lstm_gates(gi + gh, state[1])
    return hc[..., :h], hc[..., h:]


def encoder_corrections(cache: BackboneCache, params: ReadParams) -> Tensor:
    """Final encoder hidden state per token, shape ``(B, m, hidden)``."""
    if len(cache.enc_hidden) < 2:
        raise CacheError("cache holds no encoder layer outputs")
    first = cache.enc_hidden[1]
    state = zero_state(params.config, first.shape[:-1])
    for phi in cache.enc_hidden[1:]:
        if phi is None:
            raise CacheError("missing encoder layer in cache")
        state = cell_step(params, "enc", phi, state)
    return state_h(state)


def decoder_corrections(cache: BackboneCache, h_enc: Tensor, params: ReadParams) -> Tensor:
    """Final decoder hidden state per token, shape ``(B, n, hidden)``."""
    layers = cache.dec_hidden[1:]
    if not layers:
        raise CacheError("cache holds no decoder layer outputs")
    if len(cache.cross_attn) != len(layers):
        raise CacheError(f"{len(layers)} decoder layers but {len(cache.cross_attn)} score matrices")
    B, n, _ = layers[0].shape
    mixed = h_enc @ params["read.psi"]  # (B, m, gates * hidden), shared by every layer
    state = zero_state(params.config, (B, n))
    for phi, sigma in zip(layers, cache.cross_attn):
        if sigma.shape[-2] != n or sigma.shape[-1] != h_enc.shape[-2]:
            raise CacheError(f"cross-attention {sigma.shape} does not match n={n}, m={h_enc.shape[-2]}")
        state = cell_step(params, "dec", phi, state, joined=sigma @ mixed)
    return state_h(state)


def adapted_hidden(cache: BackboneCache, params: ReadParams) -> Tensor:
    h_dec = decoder_corrections(cache, encoder_corrections(cache, params), params)
    return cache.dec_hidden[-1] + h_dec @ params["read.out"]


def adapted_forward(X, Y, backbone: Backbone, params: ReadParams, src_mask=None,
                    tgt_mask=None) -> Tensor:
    """Logits of the frozen backbone corrected by the side network."""
    _, cache = backbone_forward(X, Y, backbone, "frozen", src_mask=src_mask, tgt_mask=tgt_mask)
    return backbone.head(adapted_hidden(cache, params))


class ReadModel(TunableModel):
    method = "read"

    def __init__(self, backbone: Backbone, params: ReadParams):
        super().__init__(backbone.with_trainable(lambda name: False), params.tensors)
        self.read_params = params

    def logits(self, X, Y, src_mask=None, tgt_mask=None) -> Tensor:
        return adapted_forward(X, Y, self.backbone, self.read_params, src_mask, tgt_mask)

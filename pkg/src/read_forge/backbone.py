"""Encoder-decoder transformer used as the frozen backbone.

Each block follows the pre-norm residual composition

    L = (F* + I) o A* + I,   F* = F o LN,   A* = A o LN

so an encoder block computes ``phi + a + F(LN(a))`` with ``a = A(LN(phi))``.
Decoder blocks run a causal self-attention residual first and then the same
composition with cross-attention as ``A``. Positions are learned absolute
embeddings added to the token embeddings; there is no dropout. The FFN
activation is configurable: the T5-sized presets use ``relu`` and the
``tiny`` preset uses ``tanh``, which keeps every block twice differentiable
so second-order error terms in the correction checks behave as ``O(eps^2)``.

Cached hidden states are block outputs (after the residual add).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    encoder_layers: int
    decoder_layers: int
    model_dim: int
    heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    max_positions: int = 512
    ffn_activation: str = "relu"
    preset_name: str = "custom"

    def __post_init__(self):
        for name in ("encoder_layers", "decoder_layers", "model_dim", "heads", "head_dim",
                     "ffn_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.ffn_activation not in ("relu", "tanh", "sigmoid"):
            raise ConfigError(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.heads * self.head_dim != self.model_dim:
            raise ConfigError(
                f"heads * head_dim must equal model_dim ({self.heads}*{self.head_dim} != {self.model_dim})")

    def with_depth(self, encoder_layers: int, decoder_layers: int | None = None) -> "BackboneConfig":
        return replace(self, encoder_layers=encoder_layers,
                       decoder_layers=encoder_layers if decoder_layers is None else decoder_layers)


# The T5-sized presets use the T5 vocabulary size.
PRESETS = {
    "t5_small_like": BackboneConfig(6, 6, 512, 8, 64, 2048, 32128, preset_name="t5_small_like"),
    "t5_base_like": BackboneConfig(12, 12, 768, 12, 64, 3072, 32128, preset_name="t5_base_like"),
    "tiny": BackboneConfig(2, 2, 32, 2, 16, 64, 16, max_positions=64, ffn_activation="tanh",
                           preset_name="tiny"),
}


def load_preset(name: str, **overrides) -> BackboneConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def parameter_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every backbone parameter, in a fixed order."""
    d, f, V, P = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (V, d),
        "embed.enc_pos": (P, d),
        "embed.dec_pos": (P, d),
    }

    def attn(prefix):
        for w in "qkvo":
            shapes[f"{prefix}.{w}"] = (d, d)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.encoder_layers):
        p = f"encoder.{i}"
        ln(f"{p}.ln1"); attn(f"{p}.attn"); ln(f"{p}.ln2"); ffn(f"{p}.ffn")
    ln("encoder.ln_f")
    for j in range(cfg.decoder_layers):
        p = f"decoder.{j}"
        ln(f"{p}.ln1"); attn(f"{p}.self"); ln(f"{p}.ln2"); attn(f"{p}.cross")
        ln(f"{p}.ln3"); ffn(f"{p}.ffn")
    ln("decoder.ln_f")
    shapes["head.w"] = (d, V)
    return shapes


def count_parameters(cfg: BackboneConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def is_bias(name: str) -> bool:
    """Bias vectors: FFN biases and layer-norm shifts."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("b1", "b2") or (leaf == "b" and ".ln" in name)


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("embed."):
        return rng.standard_normal(shape)
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b1", "b2"):
        return np.zeros(shape)
    return rng.standard_normal(shape) / np.sqrt(shape[0])


# ---------------------------------------------------------------------------
# Hooks let PETL methods and perturbations rewrite parts of the forward pass
# ---------------------------------------------------------------------------


class ForwardHooks:
    """No-op hook set; subclasses override the points they modify."""

    def linear(self, name: str, x: Tensor, w: Tensor) -> Tensor:
        return x @ w

    def sublayer(self, name: str, out: Tensor) -> Tensor:
        """Called on each attention / FFN output before its residual add."""
        return out

    def layer_output(self, name: str, out: Tensor) -> Tensor:
        return out

    def encoder_embeddings(self, emb: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return emb, mask


NO_HOOKS = ForwardHooks()


@dataclass
class BackboneLayer:
    kind: str  # "encoder" | "decoder"
    index: int
    params: dict[str, Tensor]
    heads: int
    activation: str = "relu"

    @property
    def name(self) -> str:
        return f"{self.kind}.{self.index}"

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]


def attention(x_q: Tensor, x_kv: Tensor, w: dict[str, Tensor], heads: int, prefix: str,
              add_mask: np.ndarray | None, hooks: ForwardHooks,
              capture: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention with output projection.

    Returns the projected output and the probabilities ``(B, H, m_q, m_k)``.
    """
    B, mq, d = x_q.shape
    mk = x_kv.shape[1]
    dh = d // heads
    q = hooks.linear(f"{prefix}.q", x_q, w["q"])
    k = hooks.linear(f"{prefix}.k", x_kv, w["k"])
    v = hooks.linear(f"{prefix}.v", x_kv, w["v"])
    qh = q.reshape(B, mq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, mk, heads, dh).transpose(0, 2, 3, 1)
    vh = v.reshape(B, mk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh) * (1.0 / np.sqrt(dh))
    if add_mask is not None:
        scores = scores + add_mask
    probs = T.softmax_rows(scores)
    ctx = (probs @ vh).transpose(0, 2, 1, 3).reshape(B, mq, d)
    if capture is not None:
        capture[prefix] = {"q": q.data, "k": k.data, "v": v.data, "probs": probs.data,
                           "context": ctx.data}
    return hooks.linear(f"{prefix}.o", ctx, w["o"]), probs.data


def _ffn(x: Tensor, p: dict[str, Tensor], prefix: str, hooks: ForwardHooks, act: str) -> Tensor:
    hidden = T.apply_unary(hooks.linear(f"{prefix}.w1", x, p["ffn.w1"]) + p["ffn.b1"], act)
    return hooks.linear(f"{prefix}.w2", hidden, p["ffn.w2"]) + p["ffn.b2"]


def _sub(p: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {w: p[f"{prefix}.{w}"] for w in "qkvo"}


def layer_forward(layer: BackboneLayer, phi_prev: Tensor, kv_context: Tensor | None = None, *,
                  self_mask: np.ndarray | None = None, cross_mask: np.ndarray | None = None,
                  hooks: ForwardHooks = NO_HOOKS,
                  capture: dict | None = None) -> tuple[Tensor, np.ndarray]:
    """One block. Returns the block output and the attention probabilities of
    the sub-block that plays ``A`` in the composition (self-attention for
    encoder blocks, cross-attention for decoder blocks)."""
    p, name = layer.params, layer.name
    d = p["ln1.g"].shape[0]
    if phi_prev.ndim != 3 or phi_prev.shape[-1] != d:
        raise DimensionError(f"{name}: hidden states must be (batch, tokens, {d}), got {phi_prev.shape}")
    if layer.kind == "encoder":
        if kv_context is not None:
            raise DimensionError(f"{name}: encoder blocks take no kv_context")
        x = T.layer_norm(phi_prev, p["ln1.g"], p["ln1.b"])
        a, probs = attention(x, x, _sub(p, "attn"), layer.heads, f"{name}.attn", self_mask,
                             hooks, capture)
        a = hooks.sublayer(f"{name}.attn", a)
        f = hooks.sublayer(f"{name}.ffn", _ffn(T.layer_norm(a, p["ln2.g"], p["ln2.b"]), p,
                                               f"{name}.ffn", hooks, layer.activation))
        out = phi_prev + a + f
    else:
        if kv_context is None:
            raise DimensionError(f"{name}: decoder blocks need a kv_context")
        if kv_context.shape[-1] != d or kv_context.shape[0] != phi_prev.shape[0]:
            raise DimensionError(f"{name}: kv_context {kv_context.shape} incompatible with {phi_prev.shape}")
        x = T.layer_norm(phi_prev, p["ln1.g"], p["ln1.b"])
        s, _ = attention(x, x, _sub(p, "self"), layer.heads, f"{name}.self", self_mask, hooks, capture)
        u = phi_prev + hooks.sublayer(f"{name}.self", s)
        c, probs = attention(T.layer_norm(u, p["ln2.g"], p["ln2.b"]), kv_context, _sub(p, "cross"),
                             layer.heads, f"{name}.cross", cross_mask, hooks, capture)
        c = hooks.sublayer(f"{name}.cross", c)
        f = hooks.sublayer(f"{name}.ffn", _ffn(T.layer_norm(c, p["ln3.g"], p["ln3.b"]), p,
                                               f"{name}.ffn", hooks, layer.activation))
        out = u + c + f
    return hooks.layer_output(name, out), probs



# ---------------------------------------------------------------------------
# Whole-model forward
# ---------------------------------------------------------------------------


@dataclass
class BackboneCache:
    """Intermediates of one forward pass, as consumed by the side network.

    ``enc_hidden[i]`` / ``dec_hidden[j]`` are block outputs with index 0 the
    embeddings. ``cross_attn[j]`` is the head-averaged cross-attention of
    decoder block ``j + 1``, shape ``(B, n, m)``.
    """

    enc_hidden: list[Tensor]
    dec_hidden: list[Tensor]
    cross_attn: list[Tensor]
    enc_self_attn: list[np.ndarray]
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    context: Tensor
    frozen: bool
    captures: dict | None = None

    def consumed_nbytes(self) -> int:
        """Bytes of the hidden states and cross-attention scores the side network reads."""
        return (sum(t.nbytes for t in self.enc_hidden[1:]) + sum(t.nbytes for t in self.dec_hidden[1:])
                + sum(t.nbytes for t in self.cross_attn))


def _check_ids(ids, vocab: int, max_positions: int, what: str) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise InputError(f"{what} ids must be (batch, length) with length >= 1, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise InputError(f"{what} ids must be integers, got {arr.dtype}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise InputError(f"{what} ids out of vocabulary range [0, {vocab})")
    if arr.shape[1] > max_positions:
        raise InputError(f"{what} length {arr.shape[1]} exceeds max_positions {max_positions}")
    return arr


def key_mask(mask: np.ndarray) -> np.ndarray:
    """(B, m) validity mask -> additive (B, 1, 1, m) score mask."""
    return np.where(mask, 0.0, MASK_VALUE)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)[None, None]


class Backbone:
    """Parameter container plus forward pass for the encoder-decoder model."""

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        missing = set(expected) - set(params)
        if missing:
            raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, config: BackboneConfig, seed: int = 0, trainable: bool = False) -> "Backbone":
        rng = np.random.default_rng(seed)
        params = {name: T.parameter(_init_array(name, shape, rng), name=name, requires_grad=trainable)
                  for name, shape in parameter_shapes(config).items()}
        return cls(config, params)

    def with_trainable(self, predicate: Callable[[str], bool]) -> "Backbone":
        """A view sharing weight arrays, with grad flags set by ``predicate(name)``.

        Optimisers replace ``.data`` rather than writing in place, so views
        never see each other's updates.
        """
        params = {name: Tensor(p.data, requires_grad=predicate(name), name=name, persistent=True)
                  for name, p in self.params.items()}
        return Backbone(self.config, params)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer(self, kind: str, index: int) -> BackboneLayer:
        prefix = f"{kind}.{index}."
        return BackboneLayer(kind, index,
                             {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)},
                             self.config.heads, self.config.ffn_activation)

    def encoder_context(self, phi_last: Tensor) -> Tensor:
        return T.layer_norm(phi_last, self.params["encoder.ln_f.g"], self.params["encoder.ln_f.b"])

    def head(self, phi: Tensor) -> Tensor:
        """Final decoder layer norm followed by the vocabulary projection."""
        x = T.layer_norm(phi, self.params["decoder.ln_f.g"], self.params["decoder.ln_f.b"])
        return x @ self.params["head.w"]

    def embed_source(self, X: np.ndarray, src_mask: np.ndarray,
                     hooks: ForwardHooks = NO_HOOKS) -> tuple[Tensor, np.ndarray]:
        emb = T.embedding(self.params["embed.token"], X)
        emb, src_mask = hooks.encoder_embeddings(emb, src_mask)
        m = emb.shape[1]
        if m > self.config.max_positions:
            raise InputError(f"source length {m} exceeds max_positions {self.config.max_positions}")
        return emb + self.params["embed.enc_pos"][:m], src_mask

    def embed_target(self, Y: np.ndarray) -> Tensor:
        n = Y.shape[1]
        return T.embedding(self.params["embed.token"], Y) + self.params["embed.dec_pos"][:n]

    def run(self, X, Y, *, hooks: ForwardHooks = NO_HOOKS, src_mask=None, tgt_mask=None,
            capture_attention: bool = False) -> tuple[Tensor, BackboneCache]:
        """Forward pass recording on the active tape (if any)."""
        cfg = self.config
        X = _check_ids(X, cfg.vocab_size, cfg.max_positions, "source")
        Y = _check_ids(Y, cfg.vocab_size, cfg.max_positions, "target")
        if X.shape[0] != Y.shape[0]:
            raise InputError(f"batch sizes differ: source {X.shape[0]}, target {Y.shape[0]}")
        src_mask = np.ones(X.shape, bool) if src_mask is None else np.asarray(src_mask, bool)
        tgt_mask = np.ones(Y.shape, bool) if tgt_mask is None else np.asarray(tgt_mask, bool)
        captures: dict | None = {} if capture_attention else None

        phi, src_mask = self.embed_source(X, src_mask, hooks)
        enc_hidden, enc_self = [phi], []
        enc_add = key_mask(src_mask)
        for i in range(cfg.encoder_layers):
            phi, probs = layer_forward(self.layer("encoder", i), phi, self_mask=enc_add,
                                       hooks=hooks, capture=captures)
            enc_hidden.append(phi)
            enc_self.append(probs)
        context = self.encoder_context(phi)

        psi = self.embed_target(Y)
        dec_hidden, cross = [psi], []
        self_add = causal_mask(Y.shape[1])
        for j in range(cfg.decoder_layers):
            psi, probs = layer_forward(self.layer("decoder", j), psi, context, self_mask=self_add,
                                       cross_mask=enc_add, hooks=hooks, capture=captures)
            dec_hidden.append(psi)
            cross.append(Tensor(probs.mean(axis=1)))
        logits = self.head(psi)
        cache = BackboneCache(enc_hidden, dec_hidden, cross, enc_self, src_mask, tgt_mask,
                              context, frozen=False, captures=captures)
        return logits, cache


def backbone_forward(X, Y, model: Backbone, mode: str = "frozen", *,
                     hooks: ForwardHooks = NO_HOOKS, src_mask=None, tgt_mask=None,
                     capture_attention: bool = False) -> tuple[Tensor, BackboneCache]:
    """Run the backbone. ``mode="frozen"`` records nothing on any tape and
    marks every cached intermediate as persistent storage."""
    if mode == "trainable":
        return model.run(X, Y, hooks=hooks, src_mask=src_mask, tgt_mask=tgt_mask,
                         capture_attention=capture_attention)
    if mode != "frozen":
        raise ConfigError(f"mode must be 'frozen' or 'trainable', got {mode!r}")
    with T.frozen():
        logits, cache = model.run(X, Y, hooks=hooks, src_mask=src_mask, tgt_mask=tgt_mask,
                                  capture_attention=capture_attention)
    for t in (*cache.enc_hidden, *cache.dec_hidden, *cache.cross_attn, cache.context):
        t.persistent = True
    cache.frozen = True
    return logits, cache

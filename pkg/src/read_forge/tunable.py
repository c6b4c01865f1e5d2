"""Common handle for every fine-tuning method (full, PETL baselines, READ)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import Backbone
from .tensor import Tensor


class TunableModel:
    """A backbone view plus any added parameters.

    Subclasses implement :meth:`logits`. Parameter names are unique across
    the backbone and the added set.
    """

    method = "base"

    def __init__(self, backbone: Backbone, extra: dict[str, Tensor] | None = None):
        self.backbone = backbone
        self.extra = dict(extra or {})

    def logits(self, X, Y, src_mask=None, tgt_mask=None) -> Tensor:
        raise NotImplementedError

    def loss(self, X, Y_in, Y_out, src_mask=None, tgt_mask=None) -> Tensor:
        return T.cross_entropy(self.logits(X, Y_in, src_mask, tgt_mask), Y_out, tgt_mask)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.extra}

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable().values())

    def total_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.trainable().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, arr in state.items():
            params[k].data = arr

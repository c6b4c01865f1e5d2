"""Synthetic sequence-to-sequence tasks (copy, reverse, sort)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS = 0, 1, 2
FIRST_PAYLOAD = 3
TASKS = ("copy", "reverse", "sort")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 1
    max_len: int = 8
    train_size: int = 4000
    val_size: int = 500
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {TASKS}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (pad, bos, eos and at least one payload token)")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"invalid length range [{self.min_len}, {self.max_len}]")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ConfigError("split sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def target_for(kind: str, payload) -> list[int]:
    payload = list(payload)
    if kind == "copy":
        return payload
    if kind == "reverse":
        return payload[::-1]
    if kind == "sort":
        return sorted(payload)
    raise ConfigError(f"unknown task {kind!r}")


@dataclass
class Split:
    """Padded arrays for one split.

    ``Y_in`` is the teacher-forced decoder input (BOS + target) and ``Y_out``
    the prediction target (target + EOS).
    """

    X: np.ndarray
    src_mask: np.ndarray
    Y_in: np.ndarray
    Y_out: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def batch(self, idx: np.ndarray) -> "Split":
        """Rows ``idx``, trimmed to the longest sequence among them."""
        m = int(self.src_mask[idx].sum(axis=1).max())
        n = int(self.tgt_mask[idx].sum(axis=1).max())
        return Split(self.X[idx, :m], self.src_mask[idx, :m], self.Y_in[idx, :n],
                     self.Y_out[idx, :n], self.tgt_mask[idx, :n])


def _encode(kind: str, payloads: list[tuple[int, ...]], max_len: int) -> Split:
    N = len(payloads)
    X = np.full((N, max_len), PAD, dtype=np.int64)
    Y_in = np.full((N, max_len + 1), PAD, dtype=np.int64)
    Y_out = np.full((N, max_len + 1), PAD, dtype=np.int64)
    for r, payload in enumerate(payloads):
        L = len(payload)
        target = target_for(kind, payload)
        X[r, :L] = payload
        Y_in[r, 0] = BOS
        Y_in[r, 1:L + 1] = target
        Y_out[r, :L] = target
        Y_out[r, L] = EOS
    lengths = np.array([len(p) for p in payloads])
    src_mask = np.arange(max_len)[None, :] < lengths[:, None]
    tgt_mask = np.arange(max_len + 1)[None, :] < (lengths + 1)[:, None]
    return Split(X, src_mask, Y_in, Y_out, tgt_mask)


def make_task(spec: TaskSpec) -> dict[str, Split]:
    """Disjoint train/val/test splits of distinct payloads, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    total = spec.train_size + spec.val_size + spec.test_size
    n_tokens = spec.vocab_size - FIRST_PAYLOAD
    capacity = sum(n_tokens ** L for L in range(spec.min_len, spec.max_len + 1))
    if capacity < total:
        raise ConfigError(f"only {capacity} distinct sequences exist, {total} requested")
    seen: set[tuple[int, ...]] = set()
    payloads: list[tuple[int, ...]] = []
    while len(payloads) < total:
        L = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq = tuple(int(t) for t in rng.integers(FIRST_PAYLOAD, spec.vocab_size, size=L))
        if seq not in seen:
            seen.add(seq)
            payloads.append(seq)
    a, b = spec.train_size, spec.train_size + spec.val_size
    return {
        "train": _encode(spec.kind, payloads[:a], spec.max_len),
        "val": _encode(spec.kind, payloads[a:b], spec.max_len),
        "test": _encode(spec.kind, payloads[b:], spec.max_len),
    }

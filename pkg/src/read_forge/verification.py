"""Verification suites shared by the ``verify`` command and the test-suite.

* gradient suite: every differentiable op, plus composed training losses,
  against central finite differences;
* attention suite: the single-head Jacobian closed forms against
  directional differences, and the bracket form against the expanded form;
* correction suites: induction and fixed-point residual slopes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, load_preset
from .corrections import (
    DEFAULT_EPS_GRID,
    AttentionWeights,
    CorrectionReport,
    PerturbationSpec,
    attention_jvp,
    dense_resolvent,
    fixed_point_report,
    induction_residual,
    self_attention_jvp_brackets,
    single_head_attention,
    solve_resolvent,
)
from .errors import ConfigError
from .petl import MethodSpec, apply_method
from .read import ReadConfig
from .tensor import Tensor

OP_TOL = 1e-6
COMPOSED_TOL = 1e-5
JVP_TOL = 1e-7
BRACKET_TOL = 1e-12
FD_STEP = 1e-6
RESOLVENT_TOL = 1e-12
# The solver's default stopping step (1e-10) leaves an error of about
# q * 1e-10 for contraction rate q, so the comparison with the dense inverse
# iterates to a tighter step.
RESOLVENT_SOLVE_TOL = 1e-14


@dataclass(frozen=True)
class CheckResult:
    """Worst relative error of one check over its random instances."""

    name: str
    worst: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tolerance

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


# ---------------------------------------------------------------------------
# Gradients of single ops
# ---------------------------------------------------------------------------


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    """Nudge entries out of ``(-margin, margin)`` so kinks sit far from the FD stencil."""
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _shape(rng, ndim=2, low=1, high=8) -> tuple[int, ...]:
    return tuple(int(s) for s in rng.integers(low, high + 1, ndim))


def _op_cases(rng: np.random.Generator) -> dict[str, Callable[[], tuple[list[Tensor], Callable]]]:
    """Each case returns (inputs, forward) with ``forward(*inputs) -> Tensor``."""

    def leaf(shape, data=None):
        return T.parameter(rng.standard_normal(shape) if data is None else data)

    def binary(op):
        def case():
            s = _shape(rng)
            return [leaf(s), leaf(s)], op
        return case

    def broadcast_add():
        m, n = _shape(rng)
        return [leaf((m, n)), leaf((n,))], T.add

    def matmul():
        m, k, n = _shape(rng, 3)
        return [leaf((m, k)), leaf((k, n))], T.matmul

    def batched_matmul():
        b, m, k, n = _shape(rng, 4, high=5)
        return [leaf((b, m, k)), leaf((k, n))], T.matmul

    def unary(name, data_fn=None):
        def case():
            s = _shape(rng)
            x = rng.standard_normal(s)
            return [leaf(s, data_fn(x) if data_fn else x)], lambda a: T.apply_unary(a, name)
        return case

    def reduce(fn):
        def case():
            return [leaf(_shape(rng))], fn
        return case

    def getitem():
        m, n = _shape(rng, low=2)
        return [leaf((m, n))], lambda a: a[1:, : n - 1]

    def fancy_getitem():
        m, n = _shape(rng, low=2)
        idx = rng.integers(0, m, 5)
        return [leaf((m, n))], lambda a: T.getitem(a, idx)

    def concat():
        m, n, k = _shape(rng, 3)
        return [leaf((m, n)), leaf((m, k))], lambda a, b: T.concat([a, b], axis=1)

    def layer_norm():
        m, d = _shape(rng, low=2)
        return [leaf((m, d)), leaf((d,)), leaf((d,))], T.layer_norm

    def embedding():
        v, d = _shape(rng)
        ids = rng.integers(0, v, (2, 3))
        return [leaf((v, d))], lambda w: T.embedding(w, ids)

    def cross_entropy():
        m, v = _shape(rng, low=2)
        targets = rng.integers(0, v, m)
        mask = rng.random(m) < 0.7
        mask[0] = True
        return [leaf((m, v))], lambda z: T.cross_entropy(z, targets, mask)

    def gru():
        m, h = _shape(rng)
        return [leaf((m, 3 * h)), leaf((m, 3 * h)), leaf((m, h))], T.gru_gates

    def lstm():
        m, h = _shape(rng)
        return [leaf((m, 4 * h)), leaf((m, h))], T.lstm_gates

    return {
        "add": binary(T.add),
        "add_broadcast": broadcast_add,
        "neg": reduce(T.neg),
        "mul": binary(T.mul),
        "matmul": matmul,
        "matmul_batched": batched_matmul,
        "sum": reduce(lambda a: T.tsum(a, axis=0)),
        "mean": reduce(lambda a: T.tmean(a, axis=-1, keepdims=True)),
        "reshape": reduce(lambda a: T.reshape(a, (-1,))),
        "transpose": reduce(T.transpose),
        "getitem": getitem,
        "getitem_fancy": fancy_getitem,
        "concat": concat,
        "tanh": unary("tanh"),
        "sigmoid": unary("sigmoid"),
        "relu": unary("relu", _away_from_zero),
        "softmax_rows": reduce(T.softmax_rows),
        "layer_norm": layer_norm,
        "embedding": embedding,
        "cross_entropy": cross_entropy,
        "gru_gates": gru,
        "lstm_gates": lstm,
    }


def _scalar_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    return out if out.size == 1 else T.tsum(out * weights)


def op_gradient_error(inputs: list[Tensor], forward: Callable, rng: np.random.Generator,
                      h: float = FD_STEP) -> float:
    """Relative error of backward vs central differences for one op instance.

    The gradients with respect to all inputs are compared as one vector, so
    an input whose gradient is tiny next to the others (the ``x`` gradient
    of a two-wide layer norm is of order its epsilon) is judged on the op's
    scale rather than amplifying finite-difference round-off.
    """
    with T.frozen():
        probe = forward(*inputs)
    weights = rng.standard_normal(probe.shape)

    def f():
        with T.frozen():
            return _scalar_loss(forward(*inputs), weights)

    tape = T.Tape()
    with tape:
        loss = _scalar_loss(forward(*inputs), weights)
    grads = T.backward(tape, loss)
    analytic = [grads.get(p, np.zeros_like(p.data)).ravel() for p in inputs]
    numeric = [T.finite_difference_gradient(f, p, h).ravel() for p in inputs]
    return T.relative_error(np.concatenate(analytic), np.concatenate(numeric))


def op_gradient_suite(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = _op_cases(rng)
    results = []
    for name, case in cases.items():
        worst = 0.0
        for _ in range(instances):
            inputs, forward = case()
            worst = max(worst, op_gradient_error(inputs, forward, rng))
        results.append(CheckResult(f"grad:{name}", worst, OP_TOL, instances))
    return results


# ---------------------------------------------------------------------------
# Gradients of composed losses
# ---------------------------------------------------------------------------


COMPOSED_CONFIG = BackboneConfig(2, 2, 8, 2, 4, 12, 10, max_positions=8, ffn_activation="tanh",
                                 preset_name="gradcheck")


def _sampled_fd(f: Callable[[], Tensor], p: Tensor, idx: np.ndarray, h: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.empty(len(idx))
    original = p.data
    for n, i in enumerate(idx):
        vals = []
        for sign in (1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * h
            p.data = bumped.reshape(original.shape)
            vals.append(float(f().item()))
        out[n] = (vals[0] - vals[1]) / (2.0 * h)
    p.data = original
    return out


def composed_gradient_error(method: MethodSpec, seed: int, coords_per_param: int = 3,
                            h: float = FD_STEP) -> float:
    """Relative error of the training-loss gradient on sampled coordinates of every
    trainable tensor, for a small random backbone and batch."""
    rng = np.random.default_rng(seed)
    cfg = COMPOSED_CONFIG
    model = apply_method(Backbone.init(cfg, seed), method, seed)
    for p in model.extra.values():
        # move off the zero-initialised start so every path carries gradient
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    B, m, n = 2, int(rng.integers(2, 6)), int(rng.integers(2, 6))
    X = rng.integers(3, cfg.vocab_size, (B, m))
    Y_in = rng.integers(1, cfg.vocab_size, (B, n))
    Y_out = rng.integers(3, cfg.vocab_size, (B, n))
    src_mask = np.ones((B, m), bool)
    src_mask[1, m - 1] = False
    tgt_mask = np.ones((B, n), bool)

    def f():
        with T.frozen():
            return model.loss(X, Y_in, Y_out, src_mask, tgt_mask)

    tape = T.Tape()
    with tape:
        loss = model.loss(X, Y_in, Y_out, src_mask, tgt_mask)
    grads = T.backward(tape, loss)
    analytic, numeric = [], []
    for p in model.trainable().values():
        idx = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        g = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        analytic.append(g[idx])
        numeric.append(_sampled_fd(f, p, idx, h))
    return T.relative_error(np.concatenate(analytic), np.concatenate(numeric))


COMPOSED_METHODS = {
    "read_gru": MethodSpec("read", read=ReadConfig("gru", 6)),
    "read_lstm": MethodSpec("read", read=ReadConfig("lstm", 6)),
    "read_vanilla": MethodSpec("read", read=ReadConfig("vanilla", 6)),
    "lora": MethodSpec("lora", rank=2),
    "adapter": MethodSpec("adapter", bottleneck=3),
    "prompt": MethodSpec("prompt", prompt_len=2),
    "bitfit": MethodSpec("bitfit"),
    "full": MethodSpec("full"),
}


def composed_gradient_suite(instances: int = 100, seed: int = 0,
                            methods: tuple[str, ...] | None = None) -> list[CheckResult]:
    """Worst composed-loss gradient error per method (all of ``COMPOSED_METHODS`` by default)."""
    names = tuple(COMPOSED_METHODS) if methods is None else methods
    unknown = sorted(set(names) - set(COMPOSED_METHODS))
    if unknown:
        raise ConfigError(f"unknown composed-check methods {unknown}")
    results = []
    for name in names:
        method = COMPOSED_METHODS[name]
        worst = max(composed_gradient_error(method, seed + k) for k in range(instances))
        results.append(CheckResult(f"grad:loss:{name}", worst, COMPOSED_TOL, instances))
    return results


# ---------------------------------------------------------------------------
# Attention closed forms
# ---------------------------------------------------------------------------


def attention_instance(rng: np.random.Generator, self_attention: bool = False):
    d = int(rng.integers(1, 9))
    mq = int(rng.integers(1, 7))
    mk = mq if self_attention else int(rng.integers(1, 7))
    w = AttentionWeights(*(rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(3)))
    phi_q = rng.standard_normal((mq, d))
    phi_k = phi_q if self_attention else rng.standard_normal((mk, d))
    phi_v = phi_q if self_attention else rng.standard_normal((mk, d))
    return w, phi_q, phi_k, phi_v


def attention_jvp_error(rng: np.random.Generator, h: float = FD_STEP) -> float:
    w, pq, pk, pv = attention_instance(rng)
    dq, dk, dv = (rng.standard_normal(x.shape) for x in (pq, pk, pv))
    state = single_head_attention(pq, pk, pv, w)
    closed = attention_jvp(state, dq, dk, dv, w)
    plus = single_head_attention(pq + h * dq, pk + h * dk, pv + h * dv, w).out
    minus = single_head_attention(pq - h * dq, pk - h * dk, pv - h * dv, w).out
    return T.relative_error(closed, (plus - minus) / (2.0 * h))


def bracket_error(rng: np.random.Generator) -> float:
    w, phi, _, _ = attention_instance(rng, self_attention=True)
    d = rng.standard_normal(phi.shape)
    state = single_head_attention(phi, phi, phi, w)
    return T.relative_error(self_attention_jvp_brackets(state, d, w), attention_jvp(state, d, d, d, w))


def attention_suite(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    jvp = max(attention_jvp_error(rng) for _ in range(instances))
    brackets = max(bracket_error(rng) for _ in range(instances))
    return [CheckResult("attention:jvp_vs_fd", jvp, JVP_TOL, instances),
            CheckResult("attention:brackets_vs_expanded", brackets, BRACKET_TOL, instances)]


def resolvent_error(rng: np.random.Generator) -> float:
    """Fixed-point ``(P + I)^{-1} y`` against the dense inverse for a random linear ``P``
    with spectral norm in [1e-3, 0.1] (the small-norm regime)."""
    d, b, m = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 7))
    down = rng.standard_normal((d, b)) / np.sqrt(d)
    up = rng.standard_normal((b, d)) / np.sqrt(b)
    up *= rng.uniform(1e-3, 0.1) / max(np.linalg.norm(down @ up, 2), 1e-12)
    y = rng.standard_normal((m, d))
    z = solve_resolvent(lambda v: v @ down @ up, y, tol=RESOLVENT_SOLVE_TOL)
    ref = dense_resolvent(down, up, y)
    return float(np.max(np.abs(z - ref)) / max(1.0, np.max(np.abs(ref))))


def resolvent_suite(instances: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = max(resolvent_error(rng) for _ in range(instances))
    return [CheckResult("fixed_point:resolvent_vs_dense", worst, RESOLVENT_TOL, instances)]


# ---------------------------------------------------------------------------
# Correction suites
# ---------------------------------------------------------------------------


def correction_inputs(cfg: BackboneConfig, seed: int = 0, batch: int = 2, src_len: int = 6,
                      tgt_len: int = 5) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return (rng.integers(3, cfg.vocab_size, (batch, src_len)),
            rng.integers(3, cfg.vocab_size, (batch, tgt_len)))


def correction_suite(backbone: Backbone, seed: int = 0,
                     eps_grid=DEFAULT_EPS_GRID) -> list[CorrectionReport]:
    X, Y = correction_inputs(backbone.config, seed)
    return [
        induction_residual(backbone, PerturbationSpec("lora", 1.0, seed=seed), X, Y, eps_grid),
        induction_residual(backbone, PerturbationSpec("adapter", 1.0, seed=seed), X, Y, eps_grid),
        fixed_point_report(backbone, PerturbationSpec("adapter", 1.0, seed=seed, placement="output"),
                           X, Y, eps_grid),
    ]


@dataclass
class VerifyResult:
    checks: list[CheckResult]
    corrections: list[CorrectionReport]

    @property
    def failures(self) -> list[str]:
        out = [c.name for c in self.checks if not c.passed]
        out += [f"{r.check}:{r.method}" for r in self.corrections if not r.passed]
        return out

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failures": self.failures,
                "checks": [c.to_dict() for c in self.checks],
                "corrections": [r.to_dict() for r in self.corrections]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [f"{'check':<34}{'worst':>12}{'tol':>10}  verdict"]
        for c in self.checks:
            rows.append(f"{c.name:<34}{c.worst:>12.3e}{c.tolerance:>10.0e}  {'pass' if c.passed else 'FAIL'}")
        return "\n\n".join(["\n".join(rows)] + [r.to_table() for r in self.corrections])


def run_verification(preset: str | BackboneConfig = "tiny", seed: int = 0, grad_instances: int = 100,
                     composed_instances: int = 20, eps_grid=DEFAULT_EPS_GRID) -> VerifyResult:
    """Run every suite; the correction checks use ``preset`` (a name or a config)."""
    checks = op_gradient_suite(grad_instances, seed)
    checks += composed_gradient_suite(composed_instances, seed)
    checks += attention_suite(grad_instances, seed)
    checks += resolvent_suite(grad_instances, seed)
    cfg = load_preset(preset) if isinstance(preset, str) else preset
    backbone = Backbone.init(cfg, seed)
    return VerifyResult(checks, correction_suite(backbone, seed, eps_grid))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from read_forge.errors import ConfigError
from read_forge.tasks import BOS, EOS, FIRST_PAYLOAD, PAD, TaskSpec, make_task, target_for


@pytest.mark.parametrize("kind, want", [("copy", [5, 7, 3]), ("reverse", [3, 7, 5]), ("sort", [3, 5, 7])])
def test_targets(kind, want):
    assert target_for(kind, [5, 7, 3]) == want


def test_unknown_task():
    with pytest.raises(ConfigError):
        TaskSpec(kind="rotate")
    with pytest.raises(ConfigError):
        target_for("rotate", [1])


@pytest.mark.parametrize("kwargs", [{"min_len": 0}, {"min_len": 5, "max_len": 4}, {"vocab_size": 3},
                                    {"train_size": 0}])
def test_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        TaskSpec(**kwargs)


def test_capacity_check():
    with pytest.raises(ConfigError, match="distinct"):
        make_task(TaskSpec(vocab_size=5, max_len=2, train_size=10, val_size=1, test_size=1))


def test_layout():
    splits = make_task(TaskSpec("reverse", train_size=50, val_size=10, test_size=10, seed=4))
    s = splits["train"]
    for r in range(len(s)):
        L = int(s.src_mask[r].sum())
        payload = s.X[r, :L]
        assert np.all(payload >= FIRST_PAYLOAD) and np.all(s.X[r, L:] == PAD)
        assert s.Y_in[r, 0] == BOS
        assert list(s.Y_out[r, :L]) == target_for("reverse", payload)
        assert s.Y_out[r, L] == EOS and int(s.tgt_mask[r].sum()) == L + 1
        assert np.array_equal(s.Y_in[r, 1:L + 1], s.Y_out[r, :L])


def test_splits_disjoint_and_seeded():
    spec = TaskSpec(train_size=200, val_size=50, test_size=50, seed=1)
    a, b = make_task(spec), make_task(spec)
    for name in ("train", "val", "test"):
        assert np.array_equal(a[name].X, b[name].X)
    rows = lambda s: {tuple(x[m]) for x, m in zip(s.X, s.src_mask)}
    assert not rows(a["train"]) & rows(a["val"]) and not rows(a["train"]) & rows(a["test"])
    assert len(rows(a["train"])) == 200


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 20))
def test_batch_trims_padding(seed, size):
    split = make_task(TaskSpec(train_size=30, val_size=1, test_size=1, seed=seed))["train"]
    idx = np.random.default_rng(seed).choice(30, size=min(size, 30), replace=False)
    b = split.batch(idx)
    assert b.src_mask[:, -1].any() and b.tgt_mask[:, -1].any()
    assert b.X.shape == b.src_mask.shape and b.Y_out.shape == b.tgt_mask.shape

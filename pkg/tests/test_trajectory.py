import numpy as np
import pytest
from scipy import stats

from padistill import data as D
from padistill import nets, trajectory as T
from padistill.scheduler import SchedulerConfig, build_plan
from padistill.tensorio import FormatError

DS = D.gen_blobs(3, 20, (1, 2, 2), 0.5, seed=0)
SPEC = nets.make_spec("tiny-mlp", (1, 2, 2), 3)


@pytest.fixture(scope="module")
def buf():
    plan = build_plan(np.arange(len(DS)), SchedulerConfig(0.5, 3, total_epochs=6))
    return T.train_buffer(DS, plan, SPEC, 3, 6, 0.05, 16, seed_base=0)


def test_snapshot_zero_is_init_and_counts(buf):
    assert len(buf) == 3 and buf.epochs == 6
    for i, t in enumerate(buf.trajectories):
        assert t.snapshots.shape == (7, SPEC.n_params)
        np.testing.assert_array_equal(t.snapshots[0], nets.init_params(SPEC, i).values)
        assert t.spec_hash == SPEC.hash and t.seed == i and len(t.train_acc) == 6


def test_zero_lr_keeps_snapshots():
    t = T.train_expert(DS, None, SPEC, 3, 0.0, 16, 5)
    assert np.all(t.snapshots == t.snapshots[0])


def test_seed_determinism():
    a = T.train_expert(DS, None, SPEC, 2, 0.05, 16, 1)
    b = T.train_expert(DS, None, SPEC, 2, 0.05, 16, 1)
    c = T.train_expert(DS, None, SPEC, 2, 0.05, 16, 2)
    np.testing.assert_array_equal(a.snapshots, b.snapshots)
    assert not np.array_equal(a.snapshots, c.snapshots)


def test_expert_converges_on_blobs():
    ds = D.gen_blobs(10, 100, (1, 8, 8), 1.0, seed=0)
    spec = nets.make_spec("tiny-mlp", (1, 8, 8), 10)
    t = T.train_expert(ds, None, spec, 30, 0.01, 64, 0)
    assert t.train_acc[-1] >= 0.95
    loss = t.train_loss
    assert np.all(loss[1:] <= loss[:-1] * 1.05)


def test_plan_mismatch_rejected():
    plan = build_plan(np.arange(len(DS)), SchedulerConfig(total_epochs=4))
    with pytest.raises(ValueError, match="plan covers"):
        T.train_expert(DS, plan, SPEC, 5, 0.1, 8, 0)


def test_current_max_start():
    r = T.MatchRange(0, 10, 20, 100, 2)
    assert T.current_max_start(r, 0) == 10
    assert T.current_max_start(r, 250) == 12
    assert T.current_max_start(r, 1000) == 20
    assert T.current_max_start(T.MatchRange(0, 4, 4, 0, 2), 10 ** 6) == 4


def test_sample_segment_bounds(buf):
    rng = np.random.default_rng(0)
    r = T.MatchRange(1, 2, 4, 10, 2)
    for it in (0, 5, 15, 100):
        start, target, t = T.sample_segment(buf, r, it, rng)
        assert 1 <= t <= T.current_max_start(r, it)
        traj = next(x for x in buf.trajectories if np.array_equal(x.snapshots[t], start))
        np.testing.assert_array_equal(target, traj.snapshots[t + 2])
    with pytest.raises(ValueError, match="exceeds"):
        T.sample_segment(buf, T.MatchRange(0, 3, 5, 1, 2), 0, rng)


def test_sample_segment_uniform_chi2(buf):
    rng = np.random.default_rng(1)
    r = T.MatchRange(0, 4, 4, 0, 2)
    ts = np.array([T.sample_segment(buf, r, 0, rng)[2] for _ in range(100_000)])
    counts = np.bincount(ts, minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01


def test_buffer_round_trip_bytes(buf, tmp_path):
    p1, p2 = tmp_path / "a.ptb", tmp_path / "b.ptb"
    T.save_buffer(buf, p1)
    back = T.load_buffer(p1, SPEC.hash)
    T.save_buffer(back, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert len(back) == 3 and back.epochs == 6


def test_buffer_errors(buf, tmp_path):
    p = tmp_path / "a.ptb"
    T.save_buffer(buf, p)
    raw = p.read_bytes()
    with pytest.raises(FormatError, match="network spec"):
        T.load_buffer(p, "0" * 64)
    (tmp_path / "t.ptb").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        T.load_buffer(tmp_path / "t.ptb")
    (tmp_path / "m.ptb").write_bytes(b"NOTTRAJ\0" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        T.load_buffer(tmp_path / "m.ptb")
    (tmp_path / "v.ptb").write_bytes(raw[:8] + (9).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError, match="version 9"):
        T.load_buffer(tmp_path / "v.ptb")
    (tmp_path / "x.ptb").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        T.load_buffer(tmp_path / "x.ptb")


def test_match_range_problems():
    assert T.MatchRange(0, 10, 20, 100, 2).problems(40) == []
    assert "exceeds buffer epochs" in T.MatchRange(0, 10, 39, 100, 2).problems(40)[0]
    assert T.MatchRange(5, 3, 4, 0, 2).problems()

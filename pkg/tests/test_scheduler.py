import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from padistill import scheduler as S
from padistill.scheduler import SchedulerConfig, build_plan, training_set

from oracles import schedule_sets


def test_reference_example_sizes():
    plan = build_plan(np.arange(100), SchedulerConfig(0.75, 20, total_epochs=40))
    sizes = [plan.set_size(e) for e in range(40)]
    assert sizes[0] == 75 and sizes[10] == 88 and sizes[20:] == [100] * 20
    assert plan.table().splitlines()[0] == "epoch,set_size,prefix_lo,prefix_hi"
    assert plan.table().splitlines()[1] == "0,75,0,75"


def test_direct_removal_example():
    ranking = np.random.default_rng(0).permutation(100)
    plan = build_plan(ranking, SchedulerConfig(1.0, 0, 0.10, 40, "direct", 50))
    assert set(training_set(plan, 40)) == set(range(100)) - set(ranking[:10])
    assert plan.set_size(39) == 100


def test_full_plan_and_default_removal_epoch():
    plan = S.full_plan(7, 3)
    assert all(sorted(training_set(plan, e)) == list(range(7)) for e in range(3))
    cfg = SchedulerConfig(0.5, 4, 0.2, None, "direct", 10)
    assert cfg.effective_removal_epoch == 4
    assert build_plan(np.arange(10), cfg).lo.tolist() == [0] * 4 + [2] * 6


def test_step_addition_holds_size_within_blocks():
    plan = build_plan(np.arange(100), SchedulerConfig(0.5, 10, total_epochs=12,
                                                     addition="step", step_epochs=5))
    assert [plan.set_size(e) for e in range(12)] == [50] * 5 + [75] * 5 + [100] * 2


@pytest.mark.parametrize("cfg, fragment", [
    (SchedulerConfig(0.75, 50, total_epochs=40), "addition_end_epoch=50.*total_epochs=40"),
    (SchedulerConfig(0.0, 1, total_epochs=4), "initial_ratio"),
    (SchedulerConfig(0.5, 0, total_epochs=4), "no epochs for adding"),
    (SchedulerConfig(1.0, 5, 0.1, 3, total_epochs=10), "precedes"),
    (SchedulerConfig(1.0, 0, 1.0, total_epochs=4), "removal_ratio"),
])
def test_invalid_configs(cfg, fragment):
    with pytest.raises(ValueError, match=fragment):
        build_plan(np.arange(10), cfg)


def test_training_set_range():
    plan = S.full_plan(3, 2)
    with pytest.raises(IndexError):
        training_set(plan, 2)


@st.composite
def instances(draw):
    n = draw(st.integers(1, 60))
    E = draw(st.integers(1, 30))
    aee = draw(st.integers(1, E))
    ir = draw(st.floats(0.01, 1.0))
    r = draw(st.sampled_from([0.0, draw(st.floats(0.0, 0.95))]))
    rm = draw(st.integers(aee, E)) if draw(st.booleans()) else None
    mode = draw(st.sampled_from(["direct", "gradual"]))
    perm = np.random.default_rng(draw(st.integers(0, 2 ** 16))).permutation(n)
    return perm, SchedulerConfig(ir, aee, r, rm, mode, E)


@settings(max_examples=200, deadline=None)
@given(instances())
def test_plan_invariants(inst):
    ranking, cfg = inst
    plan = build_plan(ranking, cfg)
    n, aee, E = len(ranking), cfg.addition_end_epoch, cfg.total_epochs
    rm = cfg.effective_removal_epoch
    k = S.floor_count(cfg.removal_ratio, n)
    for e in range(E):
        members = training_set(plan, e)
        lo, hi = plan.lo[e], plan.hi[e]
        np.testing.assert_array_equal(members, ranking[lo:hi])
        if rm is None or e < rm:
            assert lo == 0  # prefix of the ranking
        if e + 1 < E and e < aee and (rm is None or e + 1 < rm):
            assert set(members) <= set(training_set(plan, e + 1))
        if aee <= e and (rm is None or e < rm):
            assert len(members) == n
        if rm is not None and e >= rm and cfg.removal_mode == "direct":
            assert members.tolist() == ranking[k:].tolist()
    assert plan.set_size(0) == S.ceil_count(cfg.initial_ratio, n) or (
        rm == 0 and cfg.removal_mode == "direct")
    want = schedule_sets(ranking, cfg.initial_ratio, aee, E, cfg.removal_ratio, rm,
                         cfg.removal_mode)
    assert [set(training_set(plan, e).tolist()) for e in range(E)] == want


def test_plan_hash_is_pure():
    cfg = SchedulerConfig(0.75, 5, total_epochs=10)
    a, b = build_plan(np.arange(20), cfg), build_plan(np.arange(20), cfg)
    assert a.hash == b.hash
    assert build_plan(np.arange(20)[::-1], cfg).hash != a.hash

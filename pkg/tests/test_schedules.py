import numpy as np
import pytest

from textdiffusion.exceptions import InvalidScheduleError
from textdiffusion.schedules import (Schedule, build_schedule, downsample,
                                     initial_std, schedule_from_spec)

KINDS = ("sqrt", "linear", "cosine")


def test_sqrt_matches_formula_to_1e12():
    sched = build_schedule("sqrt", 2000, s=1e-4)
    t = np.arange(1, 2001)
    expected = np.maximum(0.0, 1.0 - np.sqrt(t / 2000 + 1e-4))
    assert np.max(np.abs(sched.alpha_bar[1:] - expected)) < 1e-12


def test_sqrt_raw_formula_overshoots_at_T():
    # raw value at t=T is 1 - sqrt(1 + s) < 0, so the clip must engage
    raw = 1.0 - np.sqrt(np.float64(1.0) + 1e-4)
    assert raw < 0
    assert build_schedule("sqrt", 2000, s=1e-4).alpha_bar[-1] == 0.0


def test_sqrt_initial_std():
    sched = build_schedule("sqrt", 2000, s=1e-4)
    # the raw formula's std at the data side: sqrt(1 - (1 - sqrt(s))) = s^0.25
    assert initial_std(sched) == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("T", [10, 50, 200, 2000])
def test_invariants_all_kinds(kind, T):
    sched = build_schedule(kind, T)
    ab = sched.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] >= 0.0
    assert np.all(sched.beta > 0) and np.all(sched.beta <= 1.0)
    # beta consistent with alpha_bar ratios wherever the ratio is defined
    prev = ab[:-1]
    ok = prev > 0
    assert np.max(np.abs(sched.beta[ok] - (1.0 - ab[1:][ok] / prev[ok]))) < 1e-12


def test_downsample_indexing():
    base = build_schedule("sqrt", 2000)
    down = downsample(base, 10)
    assert down.T == 200
    assert np.array_equal(down.alpha_bar, base.alpha_bar[::10])
    assert down.model_step(5) == 50


def test_downsample_stride_one_identity():
    base = build_schedule("cosine", 200)
    down = downsample(base, 1)
    assert np.array_equal(down.alpha_bar, base.alpha_bar)
    assert np.array_equal(down.beta, base.beta)


def test_downsample_beta_recomputed():
    base = build_schedule("linear", 200)
    down = downsample(base, 4)
    ab = base.alpha_bar
    for t in range(1, 51):
        expect = 1.0 - ab[4 * t] / ab[4 * (t - 1)]
        assert down.beta[t - 1] == pytest.approx(expect, abs=1e-12)


def test_downsample_composes():
    base = build_schedule("sqrt", 2000)
    ab_two_hops = downsample(downsample(base, 2), 5).alpha_bar
    ab_one_hop = downsample(base, 10).alpha_bar
    assert np.array_equal(ab_two_hops, ab_one_hop)


def test_downsample_bad_stride():
    with pytest.raises(InvalidScheduleError):
        downsample(build_schedule("sqrt", 2000), 3)


def test_spec_roundtrip():
    for sched in (build_schedule("sqrt", 2000, s=1e-4),
                  build_schedule("linear", 200),
                  downsample(build_schedule("sqrt", 2000), 10)):
        again = schedule_from_spec(sched.spec())
        assert np.array_equal(again.alpha_bar, sched.alpha_bar)
        assert np.array_equal(again.base_steps, sched.base_steps)


def test_invalid_params():
    with pytest.raises(InvalidScheduleError):
        build_schedule("sqrt", 0)
    with pytest.raises(InvalidScheduleError):
        build_schedule("sqrt", 100, s=2.0)
    with pytest.raises(InvalidScheduleError):
        build_schedule("nosuch", 100)


def test_schedule_validation_rejects_bad_arrays():
    good = build_schedule("sqrt", 10)
    ab = good.alpha_bar.copy()
    ab[3] = ab[2]  # not strictly decreasing
    with pytest.raises(InvalidScheduleError):
        Schedule(kind="sqrt", T=10, beta=good.beta.copy(), alpha_bar=ab, s=1e-4)

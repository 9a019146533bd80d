import numpy as np
import pytest
from hypothesis import given, strategies as st

from dlcpsim.sgdlab import (DropMode, DropOutcome, DropPolicy, TaskKind, ToyTask, aggregate,
                            drop_mask, fit_cost_curve, fit_cost_curves, median_extra, sweep,
                            train_with_drops, validate_task, write_outcomes)

SEEDS = range(5)


def extra(task, policy, seeds=SEEDS):
    base = sweep(task, [DropPolicy()], seeds)
    return median_extra(sweep(task, [policy], seeds), base, task.max_epochs)


def test_zero_drop_equals_baseline_and_is_reproducible():
    task = ToyTask()
    a = train_with_drops(task, DropPolicy(), seed=3)
    b = train_with_drops(task, DropPolicy(DropMode.UNIFORM, 0.0), seed=3)
    assert a == b and a.converged and a.dropped_fraction == 0


def test_all_tasks_reach_their_default_target():
    for kind in TaskKind:
        assert validate_task(ToyTask(kind=kind)).converged


def test_unreachable_target_rejected():
    with pytest.raises(ValueError):
        validate_task(ToyTask(target=1.01, max_epochs=2))


@given(st.integers(1, 500), st.floats(0.01, 0.9), st.integers(0, 2**32 - 1))
def test_single_worker_skips_exactly_the_dropped_set(n, p, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal(n).astype(np.float32)
    mask = drop_mask(g, DropPolicy(DropMode.UNIFORM, p), None, rng)
    upd, ok = aggregate(g[None, :], mask[None, :])
    assert np.array_equal(~ok, mask)
    assert np.all(upd[mask] == 0)
    assert np.array_equal(upd[~mask], g[~mask].astype(np.float64))


def test_mean_over_received_values():
    grads = np.array([[1, 2, 3], [3, 4, 5]], dtype=np.float32)
    dropped = np.array([[True, False, True], [False, False, True]])
    upd, ok = aggregate(grads, dropped)
    assert upd.tolist() == [3.0, 3.0, 0.0] and ok.tolist() == [True, True, False]


def test_block_granularity_drops_whole_blocks():
    g = np.ones(1000, np.float32)
    mask = drop_mask(g, DropPolicy(DropMode.UNIFORM, 0.5, block_size=350), None,
                     np.random.default_rng(1))
    for lo in range(0, 1000, 350):
        assert len(set(mask[lo:lo + 350].tolist())) == 1


def test_magnitude_band_only_drops_its_band():
    g = np.arange(1, 101, dtype=np.float32)
    mask = drop_mask(g, DropPolicy(DropMode.MAGNITUDE_BAND, 0.99, "largest-20"), None,
                     np.random.default_rng(0))
    assert mask[:80].sum() == 0 and mask[80:].sum() > 10


def test_policy_validation():
    with pytest.raises(ValueError):
        DropPolicy(DropMode.LAYER_BAND, 0.1, "largest-20")
    with pytest.raises(ValueError):
        DropPolicy(DropMode.UNIFORM, 1.0)
    with pytest.raises(ValueError):
        DropPolicy(block_size=0)


def test_block_size_reported():
    o = train_with_drops(ToyTask(kind=TaskKind.LINEAR), DropPolicy(DropMode.UNIFORM, 0.1, block_size=8))
    assert o.block_size == 8 and o.row()["block_size"] == 8


def test_outcomes_csv(tmp_path):
    outs = sweep(ToyTask(kind=TaskKind.LINEAR), [DropPolicy()], [0, 1])
    write_outcomes(tmp_path / "o.csv", outs)
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0].split(",")[-1] == "block_size" and len(lines) == 3


# ------------------------------------------------------------------ cost fit
def test_all_zero_sweep_fits_zero_curve():
    f = fit_cost_curve({0.0: [0, 0, 0], 0.05: [0, 0, 0], 0.2: [0, 0, 0]})
    assert all(y == 0 for y in f.ys) and f(0.3) == 0


def test_knee_at_small_gradient_tolerance():
    pts = {0.0: [0] * 3, 0.016: [0] * 3, 0.1: [8.4] * 3, 0.5: [48.4] * 3}
    f = fit_cost_curve(pts)
    assert f(0.01) == 0 and f(0.016) == 0
    assert f(0.058) == pytest.approx(4.2)
    assert f(0.3) == pytest.approx(28.4)


@given(st.dictionaries(st.floats(0.001, 0.99), st.lists(st.floats(-5, 50), min_size=3, max_size=5),
                       min_size=2, max_size=8))
def test_isotonic_fit_monotone(points):
    f = fit_cost_curve(points)
    assert f.ys[0] == 0 and f.xs[0] == 0
    assert all(b >= a for a, b in zip(f.ys, f.ys[1:]))


def test_insufficient_points_rejected():
    with pytest.raises(ValueError):
        fit_cost_curve({0.1: [1, 2, 3]})
    with pytest.raises(ValueError):
        fit_cost_curve({0.0: [0, 0, 0], 0.1: [1]})


def test_cost_curves_from_outcomes():
    def oc(label, p, seed, epochs):
        return DropOutcome(label, p, seed, epochs, epochs * 10, 0.9, True)
    base = [oc("uniform", 0.0, s, 10) for s in range(3)]
    outs = [oc("magnitude-band:smallest-20", p, s, 10 + e) for s in range(3) for p, e in ((0.1, 0), (0.3, 1))]
    outs += [oc("magnitude-band:largest-20", p, s, 10 + e) for s in range(3) for p, e in ((0.1, 2), (0.3, 5))]
    cost = fit_cost_curves(outs, base, 80, 3)
    assert cost.n_queues == 3
    assert cost.small[0](0.3) == 1 and cost.large[2](0.1) == 2


# --------------------------------------------------------- ensemble trends
def test_median_epochs_non_decreasing_in_uniform_p():
    task = ToyTask()
    base = sweep(task, [DropPolicy()], SEEDS)
    meds = [median_extra(sweep(task, [DropPolicy(DropMode.UNIFORM, p)], SEEDS), base, task.max_epochs)
            for p in (0.1, 0.5, 0.8)]
    assert meds == sorted(meds) and meds[-1] > 0


def test_largest_magnitudes_hurt_at_least_as_much_as_smallest():
    task = ToyTask()
    large = extra(task, DropPolicy(DropMode.MAGNITUDE_BAND, 0.3, "largest-20"))
    small = extra(task, DropPolicy(DropMode.MAGNITUDE_BAND, 0.3, "smallest-20"))
    assert large >= small and large > 0


def test_back_layers_hurt_at_least_as_much_as_front_layers():
    task = ToyTask()
    p = 0.8
    back = extra(task, DropPolicy(DropMode.LAYER_BAND, p, "back-20"))
    front = extra(task, DropPolicy(DropMode.LAYER_BAND, p, "front-20"))
    assert back >= front

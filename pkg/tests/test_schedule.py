import math

import numpy as np
import pytest

from fedgate import autodiff as ad
from fedgate.errors import ConfigError, NoDescentError
from fedgate.schedule import OneCycleSchedule, lr_range_test, one_cycle_lr, suggest_bounds, sweep_lrs


@pytest.mark.parametrize("peak", [0.5, 0.6])
def test_peak_at_midpoint(peak):
    s = OneCycleSchedule(100, 0.01, peak)
    assert one_cycle_lr(s, 50) == peak
    assert max(s(k) for k in range(101)) == peak


def test_endpoints_exact():
    s = OneCycleSchedule(100, 0.01, 0.5)
    assert s(0) == 0.01 and s(100) == 0.01


@pytest.mark.parametrize("total", [1, 2, 3, 7, 10, 99, 100, 101])
def test_symmetry_exact(total):
    s = OneCycleSchedule(total, 0.002, 0.6)
    for k in range(total + 1):
        assert s(k) == s(total - k)
    assert s(0) == s(total) == 0.002


def test_linear_ramp():
    s = OneCycleSchedule(10, 0.1, 1.1)
    np.testing.assert_allclose([s(k) for k in range(11)],
                               [0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 0.9, 0.7, 0.5, 0.3, 0.1], rtol=1e-12)


def test_from_peak_default_floor():
    s = OneCycleSchedule.from_peak(20, 0.5)
    assert s.lr_min == 0.5 / 25


def test_out_of_range_step():
    s = OneCycleSchedule(10, 0.01, 0.5)
    with pytest.raises(ConfigError):
        s(11)
    with pytest.raises(ConfigError):
        s(-1)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        OneCycleSchedule(0, 0.01, 0.5)
    with pytest.raises(ConfigError):
        OneCycleSchedule(10, 0.5, 0.5)


def test_sweep_grid_endpoints_and_interior():
    lrs = sweep_lrs(1e-15, 1.0, 10)
    assert lrs[0] == 1e-15 and lrs[9] == 1.0
    assert lrs[5] == pytest.approx(1e-15 * (1e15) ** (5 / 9), rel=1e-12)
    ratios = lrs[1:] / lrs[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-10)
    assert np.all(np.diff(lrs) > 0)


class Quadratic:
    """One parameter, loss = c * (w - 1)^2."""

    def __init__(self, w0=4.0, c=50.0):
        self.params = {"w": ad.Tensor(np.array([[w0]]), requires_grad=True)}
        self.c = c

    def zero_grad(self):
        self.params["w"].grad = None


def quad_loss(model, batch, step):
    d = ad.dense(ad.Tensor(np.ones((1, 1))), model.params["w"], ad.Tensor(np.array([-1.0])))
    return ad.weighted_sum(d * d, np.array([[model.c]]))


def test_quadratic_oracle_brackets_descent():
    model = Quadratic()
    before = model.params["w"].data.copy()
    res = lr_range_test(model, [None], quad_loss, steps=100, lr_lo=1e-6, lr_hi=1.0, beta=0.7)
    assert model.params["w"].data.tobytes() == before.tobytes()
    assert res.aborted_at is not None  # it diverged before lr_hi
    s = res.smoothed_loss
    i_best = int(np.argmin(s))
    assert s[i_best] < 0.1 * s[0]  # descended
    lo, hi = res.suggested_min_lr, res.suggested_max_lr
    assert lo < hi
    # the divergence lr: first point after the minimum above twice the minimum
    div = res.lrs[i_best + int(np.nonzero(s[i_best:] > 2 * s[i_best])[0][0])]
    assert hi < div
    i_lo = int(np.nonzero(res.lrs == lo)[0][0])
    assert s[i_lo + 1] < s[i_lo]  # min_lr sits on the descending limb


def test_csv_header():
    res = lr_range_test(Quadratic(), [None], quad_loss, steps=12, lr_lo=1e-4, lr_hi=1e-2)
    lines = res.to_csv().splitlines()
    assert lines[0] == "lr,raw_loss,smoothed_loss"
    assert len(lines) == 13


def test_range_test_preconditions():
    with pytest.raises(ConfigError):
        lr_range_test(Quadratic(), [None], quad_loss, steps=9)
    with pytest.raises(ConfigError):
        lr_range_test(Quadratic(), [None], quad_loss, steps=20, lr_lo=1.0, lr_hi=0.5)


def test_nonfinite_loss_aborts_and_restores():
    model = Quadratic()

    def bad(model, batch, step):
        if step == 5:
            return ad.Tensor(np.array(math.nan))
        return quad_loss(model, batch, step)

    res = lr_range_test(model, [None], bad, steps=20, lr_lo=1e-6, lr_hi=1e-3)
    assert res.aborted_at == 5 and len(res.raw_loss) == 6
    assert model.params["w"].data[0, 0] == 4.0


def test_bias_corrected_smoothing():
    res = lr_range_test(Quadratic(), [None], lambda m, b, k: ad.Tensor(np.array(2.0 + k)), steps=10,
                        lr_lo=1e-6, lr_hi=1e-3, beta=0.5, abort_factor=1e9)
    # first smoothed value equals the first raw value
    assert res.smoothed_loss[0] == 2.0
    avg, expect = 0.0, []
    for i, v in enumerate(res.raw_loss):
        avg = 0.5 * avg + 0.5 * v
        expect.append(avg / (1 - 0.5 ** (i + 1)))
    np.testing.assert_allclose(res.smoothed_loss, expect, rtol=1e-15)


def test_v_shaped_curve():
    lrs = np.geomspace(1e-4, 10, 30)
    s = np.abs(np.log10(lrs) - np.log10(0.1)) + 0.5
    lo, hi = suggest_bounds(lrs, s)
    assert lo < 0.1 < hi or hi == pytest.approx(0.1)
    # divergence point: first lr after the minimum with loss above twice the minimum
    i_min = int(np.argmin(s))
    div = lrs[i_min + int(np.nonzero(s[i_min:] > 2 * s[i_min])[0][0])]
    assert hi < div
    assert lo < lrs[i_min]


def test_flat_loss_has_no_descent():
    with pytest.raises(NoDescentError):
        suggest_bounds(np.geomspace(1e-4, 1, 20), np.ones(20))


def test_increasing_loss_has_no_descent():
    with pytest.raises(NoDescentError):
        suggest_bounds(np.geomspace(1e-4, 1, 20), np.linspace(1, 3, 20))


def test_strictly_decreasing_gives_last_lr():
    lrs = np.geomspace(1e-4, 1, 20)
    lo, hi = suggest_bounds(lrs, np.linspace(3, 1, 20))
    assert hi == lrs[-1]
    assert lo < hi


def test_too_few_points():
    with pytest.raises(NoDescentError):
        suggest_bounds(np.geomspace(1e-4, 1, 9), np.linspace(3, 1, 9))

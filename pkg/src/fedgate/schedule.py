"""One-cycle learning-rate policy and the learning-rate range test."""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NoDescentError


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    lr_min: float
    lr_max: float

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0 < self.lr_min < self.lr_max:
            raise ConfigError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")

    @classmethod
    def from_peak(cls, total_steps, lr_max, lr_min=None):
        """lr_min defaults to lr_max / 25."""
        return cls(total_steps, lr_max / 25 if lr_min is None else lr_min, lr_max)

    def __call__(self, step):
        return one_cycle_lr(self, step)


def one_cycle_lr(schedule, step):
    """Triangular cycle: lr_min at both ends, lr_max at floor(total/2).

    The ramp is measured as min(step, total - step) / floor(total/2), which is
    symmetric for every total and also reaches the peak at ceil(total/2).
    """
    total = schedule.total_steps
    if not 0 <= step <= total:
        raise ConfigError(f"step {step} outside [0, {total}]")
    half = total // 2
    if half == 0:
        return schedule.lr_min
    frac = min(step, total - step) / half
    return schedule.lr_min * (1 - frac) + schedule.lr_max * frac


@dataclass
class LrSweepResult:
    lrs: np.ndarray
    raw_loss: np.ndarray
    smoothed_loss: np.ndarray
    suggested_min_lr: float = None
    suggested_max_lr: float = None
    aborted_at: int = None

    @property
    def points(self):
        return list(zip(self.lrs.tolist(), self.raw_loss.tolist(), self.smoothed_loss.tolist()))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lr", "raw_loss", "smoothed_loss"])
        for row in self.points:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def sweep_lrs(lr_lo, lr_hi, steps):
    """Geometric grid with exact endpoints: lr_i = lo * (hi/lo)**(i/(steps-1))."""
    if steps < 2:
        raise ConfigError("a sweep needs at least 2 steps")
    if not 0 < lr_lo < lr_hi:
        raise ConfigError(f"need 0 < lr_lo < lr_hi, got {lr_lo}, {lr_hi}")
    return np.geomspace(lr_lo, lr_hi, steps)


def lr_range_test(model, batches, loss_fn, steps=100, lr_lo=1e-15, lr_hi=1.0, beta=0.98,
                  momentum=0.9, abort_factor=4.0, divergence_factor=2.0):
    """Train one step per batch while the learning rate rises geometrically.

    ``model`` exposes ``params`` (name -> Tensor); ``batches`` is a sequence
    cycled as needed; ``loss_fn(model, batch, step)`` returns a scalar Tensor.
    Parameters are restored bit-for-bit afterwards.
    """
    if steps < 10:
        raise ConfigError(f"range test needs at least 10 steps, got {steps}")
    if not 0 <= beta < 1:
        raise ConfigError(f"smoothing beta must lie in [0, 1), got {beta}")
    if len(batches) == 0:
        raise ConfigError("range test needs at least one batch")
    lrs = sweep_lrs(lr_lo, lr_hi, steps)
    saved = {name: p.data.copy() for name, p in model.params.items()}
    state = ad.SgdState(momentum)
    raw, smooth = [], []
    avg, best, aborted = 0.0, math.inf, None
    try:
        for i, lr in enumerate(lrs):
            model.zero_grad()
            loss = loss_fn(model, batches[i % len(batches)], i)
            value = float(loss.data)
            raw.append(value)
            if not math.isfinite(value):
                smooth.append(math.inf)
                aborted = i
                break
            avg = beta * avg + (1 - beta) * value
            s = avg / (1 - beta ** (i + 1))
            smooth.append(s)
            best = min(best, s)
            if i > 0 and s > abort_factor * best:
                aborted = i
                break
            loss.backward()
            try:
                ad.sgd_step(model.params, state, float(lr))
            except Exception:
                aborted = i
                break
    finally:
        for name, p in model.params.items():
            p.data = saved[name]
            p.grad = None
    n = len(raw)
    result = LrSweepResult(lrs[:n].copy(), np.array(raw), np.array(smooth), aborted_at=aborted)
    try:
        result.suggested_min_lr, result.suggested_max_lr = suggest_bounds(
            result.lrs, result.smoothed_loss, divergence_factor)
    except NoDescentError:
        pass
    return result


def suggest_bounds(lrs, smoothed, divergence_factor=2.0):
    """Pick (min_lr, max_lr) from a smoothed sweep.

    min_lr: left end of the steepest descending segment in log-lr.
    max_lr: last lr before the loss, after its minimum, first exceeds
    divergence_factor * min. Ties resolve to the smaller lr.
    """
    lrs = np.asarray(lrs, dtype=np.float64)
    s = np.asarray(smoothed, dtype=np.float64)
    ok = np.isfinite(s)
    # only the finite prefix is usable
    cut = int(np.argmin(ok)) if not ok.all() else len(s)
    lrs, s = lrs[:cut], s[:cut]
    if len(s) < 10:
        raise NoDescentError(f"need at least 10 finite sweep points, got {len(s)}")
    slopes = np.diff(s) / np.diff(np.log(lrs))
    i_steep = int(np.argmin(slopes))
    if not slopes[i_steep] < 0:
        raise NoDescentError("smoothed loss never decreases; no usable learning-rate range")
    i_min = int(np.argmin(s))
    above = np.nonzero(s[i_min:] > divergence_factor * s[i_min])[0]
    i_max = len(s) - 1 if len(above) == 0 else i_min + int(above[0]) - 1
    return float(lrs[i_steep]), float(lrs[i_max])

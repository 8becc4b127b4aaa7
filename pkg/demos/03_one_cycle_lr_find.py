"""Pick learning-rate bounds with a range test, then train one cycle.

The range test raises the learning rate geometrically each step and watches
the smoothed loss. The suggested maximum sits at the steepest useful part
before the loss blows up; the one-cycle policy then climbs from lr_max/25 to
that peak and back down.
"""

import numpy as np

from fedgate import autodiff as ad
from fedgate.federated import evaluate, train_local
from fedgate.ingest import synth_dataset, to_dataset
from fedgate.model import ArchConfig, build_model
from fedgate.schedule import OneCycleSchedule, lr_range_test

arch = ArchConfig()
train = to_dataset(synth_dataset(20, 9, 24, 24, seed=3), arch)
val = to_dataset(synth_dataset(10, 9, 24, 24, seed=4, prefix="val"), arch)

model = build_model(arch, seed=0)
rng = np.random.default_rng(0)


order = rng.permutation(len(train.labels))
batches = [(train.rgb[idx], train.diff[idx], train.labels[idx]) for idx in np.array_split(order, 10)]


def loss_fn(m, batch, step):
    rgb, diff, y = batch
    return ad.bce_with_logits(m.forward(rgb, diff, training=True, rng=rng), y)


sweep = lr_range_test(model, batches, loss_fn, steps=60, lr_lo=1e-6, lr_hi=10.0)
print(f"sweep of {len(sweep.lrs)} steps from {sweep.lrs[0]:g} to {sweep.lrs[-1]:g}")
if sweep.aborted_at is not None:
    print(f"loss diverged at step {sweep.aborted_at}, lr {sweep.lrs[-1]:.3g}")
print(f"suggested bounds: {sweep.suggested_min_lr:.3g} .. {sweep.suggested_max_lr:.3g}")

sched = OneCycleSchedule.from_peak(20, 0.05)
print("one-cycle over 20 steps:", " ".join(f"{sched(k):.3f}" for k in range(0, 21, 5)))

model = build_model(arch, seed=0)
train_local(model, train, epochs=6, batch_size=2, lr_max=0.04, rng=np.random.default_rng(1), clip_norm=5.0)
report = evaluate(model, val)
print(f"validation after one cycle: accuracy {report.accuracy:.2f}, auc {report.auc:.2f}, loss {report.loss:.3f}")

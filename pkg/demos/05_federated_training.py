"""Federated averaging on a desk-sized synthetic violence dataset.

Four clients each hold a stratified slice of 40 clips. Every round the
server broadcasts the global weights, each client runs one local one-cycle
of SGD, and the server replaces the global model by the sample-weighted
mean. Round 0 is the untrained model, whose output head starts at zero so
every score is exactly 0.5.
"""

import time

from fedgate.federated import FedConfig, fed_train, stratified_partition
from fedgate.ingest import synth_dataset, to_dataset
from fedgate.model import ArchConfig

arch = ArchConfig()
train = to_dataset(synth_dataset(20, 9, 24, 24, seed=100), arch)
val = to_dataset(synth_dataset(10, 9, 24, 24, seed=200, prefix="val"), arch)
shards = stratified_partition(train.ids, train.labels, 4, seed=0)
data = {s.client_id: train.subset(s.sample_ids) for s in shards}

for participation in ("all", "sample"):
    cfg = FedConfig(n_clients=4, rounds=4, participation=participation, seed=0)
    t0 = time.perf_counter()
    reports, _ = fed_train(cfg, arch, shards, val, client_data=data)
    print(f"participation={participation} ({time.perf_counter() - t0:.0f}s)")
    for r in reports:
        print("  " + r.to_line().rsplit(" wall_time=", 1)[0])

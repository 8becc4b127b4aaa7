"""Stratified client partitioning, FederatedAveraging and the round orchestrator."""

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .errors import ConfigError, IncompatibleModelError, PartitionError, RoundAbortedError
from .metrics import EvalReport, accuracy, roc_auc
from .model import build_model
from .schedule import OneCycleSchedule

log = logging.getLogger(__name__)


# -------------------------------------------------------------- partitioning

@dataclass
class ClientShard:
    client_id: str
    sample_ids: list
    n_pos: int
    n_neg: int

    def __len__(self):
        return len(self.sample_ids)


def client_name(i):
    return f"client{i:03d}"


def stratified_partition(sample_ids, labels, n_clients, seed, allow_small=False):
    """Give every sample to exactly one client while balancing classes per client.

    Positives and negatives are each shuffled with the seed, then dealt with a
    single round-robin pointer that carries on from the positives into the
    negatives, so shard sizes also differ by at most one.
    """
    labels = [int(v) for v in labels]
    if len(sample_ids) != len(labels):
        raise PartitionError(f"{len(sample_ids)} ids but {len(labels)} labels")
    if len(set(sample_ids)) != len(sample_ids):
        raise PartitionError("sample ids must be unique")
    if n_clients < 1:
        raise PartitionError(f"need at least one client, got {n_clients}")
    pos = [s for s, y in zip(sample_ids, labels) if y == 1]
    neg = [s for s, y in zip(sample_ids, labels) if y == 0]
    if not pos or not neg:
        raise PartitionError("both classes must be present to partition")
    if n_clients > min(len(pos), len(neg)) and not allow_small:
        raise PartitionError(
            f"{n_clients} clients but only {len(pos)} positive / {len(neg)} negative samples; "
            "pass allow_small=True to permit clients missing a class")
    rng = rngmod.stream(seed, rngmod.PARTITION)
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    buckets = [[] for _ in range(n_clients)]
    counts = [[0, 0] for _ in range(n_clients)]
    k = 0
    for group, lab in ((pos, 1), (neg, 0)):
        for s in group:
            buckets[k % n_clients].append(s)
            counts[k % n_clients][lab] += 1
            k += 1
    return [ClientShard(client_name(i), b, c[1], c[0]) for i, (b, c) in enumerate(zip(buckets, counts))]


def partition_records(records, n_clients, seed, allow_small=False):
    """Fill the client_id column of manifest records."""
    from .ingest import ManifestRecord, sample_id
    ids = [sample_id(r) for r in records]
    shards = stratified_partition(ids, [r.label for r in records], n_clients, seed, allow_small)
    owner = {s: sh.client_id for sh in shards for s in sh.sample_ids}
    return [ManifestRecord(r.path, r.label, owner[i]) for r, i in zip(records, ids)], shards


def shards_from_records(records):
    from .ingest import sample_id
    by_client = {}
    for r in records:
        if r.client_id is None:
            raise PartitionError(f"manifest record {r.path!r} has no client_id")
        by_client.setdefault(r.client_id, []).append(r)
    return [
        ClientShard(cid, [sample_id(r) for r in rs], sum(r.label for r in rs), sum(1 - r.label for r in rs))
        for cid, rs in sorted(by_client.items())
    ]


# ---------------------------------------------------------------- averaging

def fedavg_aggregate(updates):
    """Sample-weighted mean of ``(ModelParams, n_samples)`` pairs.

    Terms are summed in a canonical order so the result does not depend on
    the order of ``updates``.
    """
    if not updates:
        raise ConfigError("fedavg_aggregate needs at least one update")
    digest = updates[0][0].layout_digest
    for mp, n in updates:
        if mp.layout_digest != digest:
            raise IncompatibleModelError(
                f"update digest {mp.layout_digest:016x} differs from {digest:016x}")
        if n < 1:
            raise ConfigError(f"n_samples must be >= 1, got {n}")

    def key(u):
        return (u[1], hashlib.blake2b(u[0].values.tobytes(), digest_size=16).digest())

    total = sum(n for _, n in updates)
    acc = np.zeros(updates[0][0].values.size, dtype=np.float64)
    for mp, n in sorted(updates, key=key):
        acc += n * mp.values.astype(np.float64)
    return updates[0][0].with_values(acc / total)


# ------------------------------------------------------------ local training

def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train_local(model, data, epochs, batch_size, lr_max, lr_min=None, momentum=0.9, rng=None,
                clip_norm=None):
    """One-cycle SGD over ``epochs`` passes of ``data``; returns the mean training loss.

    The schedule spans every local step: total = epochs * batches_per_epoch.
    ``rng`` drives both shuffling and dropout. ``clip_norm`` caps the joint
    gradient norm of each step (None or 0 disables it).
    """
    if rng is None:
        raise ConfigError("train_local needs an rng")
    n = len(data)
    per_epoch = math.ceil(n / batch_size)
    sched = OneCycleSchedule.from_peak(epochs * per_epoch, lr_max, lr_min)
    state = ad.SgdState(momentum)
    losses, step = [], 0
    for _ in range(epochs):
        for idx in _batches(n, batch_size, rng):
            model.zero_grad()
            logits = model.forward(data.rgb[idx], data.diff[idx], training=True, rng=rng)
            loss = ad.bce_with_logits(logits, data.labels[idx])
            loss.backward()
            if clip_norm:
                ad.clip_grad_norm(model.params, clip_norm)
            ad.sgd_step(model.params, state, sched(step))
            losses.append(float(loss.data))
            step += 1
    return float(np.mean(losses))


def evaluate(model, data, batch_size=16):
    logits = np.concatenate([
        model.forward(data.rgb[s:s + batch_size], data.diff[s:s + batch_size]).data.astype(np.float64)
        for s in range(0, len(data), batch_size)
    ])
    y = data.labels.astype(np.float64)
    loss = float(np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))
    scores = ad._sigmoid(logits)
    try:
        points, auc = roc_auc(scores, data.labels)
    except Exception:
        points, auc = [], float("nan")
    return EvalReport(len(data), accuracy(scores, data.labels), auc, loss, points)


def train_centralized(arch, data, epochs, batch_size=4, lr_max=0.05, lr_min=None, momentum=0.9,
                      seed=0, cycles=1, initial=None, clip_norm=None):
    """Centralized one-cycle baseline. Cycle ``r`` (1-based) uses the same stream a
    lone federated client would get in round ``r``."""
    model = build_model(arch, seed=seed)
    if initial is not None:
        model.set_params(initial)
    for r in range(1, cycles + 1):
        train_local(model, data, epochs, batch_size, lr_max, lr_min, momentum, rngmod.client_stream(seed, 0, r),
                    clip_norm)
    return model


# ------------------------------------------------------------ orchestration

@dataclass
class FedConfig:
    n_clients: int = 4
    rounds: int = 4
    participation: str = "all"  # "all" or "sample"
    sample_fraction: float = 0.5
    local_epochs: int = 6
    batch_size: int = 2
    lr_max: float = 0.04
    lr_min: float = None
    momentum: float = 0.9
    seed: int = 0
    sequential: bool = True
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.n_clients < 1 or self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("n_clients, rounds, local_epochs and batch_size must be positive")
        if self.participation not in ("all", "sample"):
            raise ConfigError(f"participation must be 'all' or 'sample', got {self.participation!r}")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")

    def participants_per_round(self, n_clients):
        if self.participation == "all":
            return n_clients
        return max(1, math.ceil(self.sample_fraction * n_clients))


@dataclass
class TrainOrder:
    round: int
    client_id: str
    client_index: int
    local_epochs: int
    batch_size: int
    lr_max: float
    lr_min: float  # 0 means lr_max / 25
    momentum: float
    seed: int
    clip_norm: float = 0.0  # 0 disables clipping


@dataclass
class ClientUpdate:
    client_id: str
    params: object  # ModelParams
    n_samples: int
    loss: float


@dataclass
class RoundReport:
    round: int
    participating_clients: list
    global_loss: float
    global_accuracy: float
    global_auc: float
    wall_time: float = 0.0
    client_losses: dict = field(default_factory=dict)

    def to_line(self):
        return (f"round={self.round} clients={','.join(self.participating_clients)} "
                f"loss={self.global_loss!r} acc={self.global_accuracy!r} auc={self.global_auc!r} "
                f"wall_time={self.wall_time:.3f}")

    def key(self):
        """Everything except wall time, for reproducibility comparisons."""
        return (self.round, tuple(self.participating_clients), self.global_loss, self.global_accuracy,
                self.global_auc)


def run_client(arch, data, global_params, order):
    """Train a fresh copy of the global model on one client's data."""
    model = build_model(arch, init="zeros")
    model.set_params(global_params)
    loss = train_local(model, data, order.local_epochs, order.batch_size, order.lr_max,
                       order.lr_min or None, order.momentum,
                       rngmod.client_stream(order.seed, order.client_index, order.round), order.clip_norm or None)
    return ClientUpdate(order.client_id, model.get_params(), len(data), loss)


class InProcessExecutor:
    """Runs client training in this process, one private model per client."""

    def __init__(self, arch, client_data, sequential=True, workers=None):
        self.arch = arch
        self.client_data = client_data
        self.sequential = sequential
        self.workers = workers

    def run(self, orders, global_params):
        def one(order):
            try:
                return run_client(self.arch, self.client_data[order.client_id], global_params, order)
            except Exception as exc:
                raise RoundAbortedError(order.client_id, exc) from exc

        if self.sequential or len(orders) < 2:
            return [one(o) for o in orders]
        with ThreadPoolExecutor(self.workers or len(orders)) as pool:
            return list(pool.map(one, orders))


def select_participants(shards, cfg, round_idx):
    k = cfg.participants_per_round(len(shards))
    if k == len(shards):
        return list(range(len(shards)))
    chosen = rngmod.stream(cfg.seed, rngmod.SELECT, round_idx).choice(len(shards), size=k, replace=False)
    return sorted(int(i) for i in chosen)


def run_round(global_params, shards, cfg, round_idx, executor, arch, val_set):
    """Broadcast, train selected clients, aggregate, evaluate. Any client failure aborts the round."""
    if not shards:
        raise ConfigError("run_round needs at least one shard")
    t0 = time.perf_counter()
    chosen = select_participants(shards, cfg, round_idx)
    orders = [
        TrainOrder(round_idx, shards[i].client_id, i, cfg.local_epochs, cfg.batch_size, cfg.lr_max,
                   cfg.lr_min or 0.0, cfg.momentum, cfg.seed, cfg.clip_norm or 0.0)
        for i in chosen
    ]
    updates = executor.run(orders, global_params)
    new_global = fedavg_aggregate([(u.params, u.n_samples) for u in updates])
    model = build_model(arch, init="zeros")
    model.set_params(new_global)
    rep = evaluate(model, val_set)
    report = RoundReport(round_idx, [o.client_id for o in orders], rep.loss, rep.accuracy, rep.auc,
                         time.perf_counter() - t0, {u.client_id: u.loss for u in updates})
    return new_global, report


def initial_params(arch, seed):
    return build_model(arch, rng=rngmod.stream(seed, rngmod.INIT)).get_params()


def fed_train(cfg, arch, shards, val_set, executor=None, client_data=None, on_round=None,
              initial=None):
    """Round 0 evaluates the initial model; rounds 1..cfg.rounds train.

    Returns ``(reports, final_params)``.
    """
    if executor is None:
        if client_data is None:
            raise ConfigError("fed_train needs an executor or per-client data")
        executor = InProcessExecutor(arch, client_data, sequential=cfg.sequential)
    global_params = initial if initial is not None else initial_params(arch, cfg.seed)
    model = build_model(arch, init="zeros")
    model.set_params(global_params)
    t0 = time.perf_counter()
    rep = evaluate(model, val_set)
    reports = [RoundReport(0, [], rep.loss, rep.accuracy, rep.auc, time.perf_counter() - t0)]
    del model
    if on_round:
        on_round(reports[0])
    for r in range(1, cfg.rounds + 1):
        global_params, report = run_round(global_params, shards, cfg, r, executor, arch, val_set)
        log.info(report.to_line())
        reports.append(report)
        if on_round:
            on_round(report)
    return reports, global_params


def smoothed(values, window=2):
    """Trailing moving average used to judge accuracy trends."""
    v = np.asarray(values, dtype=np.float64)
    return np.array([v[max(0, i - window + 1):i + 1].mean() for i in range(len(v))])

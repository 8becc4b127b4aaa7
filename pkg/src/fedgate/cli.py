"""Command-line entry point: ``fedgate <command> [options]``.

Every command accepts ``--config FILE`` (flat key=value) and per-key flags;
flags win over the file. Outputs go under ``--out`` together with
``run.cfg``, the fully resolved configuration.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 protocol
error, 5 training error, 1 anything else.
"""

import argparse
import logging
import os
import sys

from . import __version__, fgt
from .config import RunConfig
from .errors import ConfigError, DataError, FedgateError

log = logging.getLogger("fedgate")

RUN_FORMAT = "fedgate-run/1"

_CONFIG_FLAGS = [
    ("--frames", int), ("--height", int), ("--width", int), ("--channel-widths", str),
    ("--fc-width", int), ("--dropout-p", float), ("--temporal-pool-window", int),
    ("--clients", int), ("--rounds", int), ("--participation", str), ("--sample-fraction", float),
    ("--local-epochs", int), ("--epochs", int), ("--batch-size", int), ("--lr-max", float),
    ("--lr-min", float), ("--momentum", float), ("--clip-norm", float), ("--seed", int), ("--diff-mode", str),
]


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run configuration (override --config)")
    g.add_argument("--config", help="flat key=value configuration file")
    for flag, kind in _CONFIG_FLAGS:
        g.add_argument(flag, type=kind, default=None)
    g.add_argument("--parallel", dest="sequential", action="store_false", default=None,
                   help="train clients of a round on worker threads (default: sequential)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {flag[2:].replace("-", "_"): getattr(args, flag[2:].replace("-", "_")) for flag, _ in _CONFIG_FLAGS}
    overrides["sequential"] = args.sequential
    return cfg.update(overrides, "command line")


def write_run_config(out, cfg, command, extra=None):
    os.makedirs(out, exist_ok=True)
    header = f"# {RUN_FORMAT} command={command} fedgate={__version__}\n"
    body = cfg.dumps()
    if extra:
        body += "".join(f"# {k}={v}\n" for k, v in extra.items())
    fgt.atomic_write(os.path.join(out, "run.cfg"), header + body)


# ------------------------------------------------------------------ commands

def cmd_synth(args, cfg):
    from .ingest import synth_dataset, write_synth
    if args.n < 2 or args.n % 2:
        raise ConfigError(f"--n must be a positive even number (balanced classes), got {args.n}")
    frames = args.raw_frames or cfg.frames + 1
    samples = synth_dataset(args.n // 2, frames, cfg.height, cfg.width, cfg.seed, prefix=args.prefix)
    manifest = write_synth(args.out, samples)
    write_run_config(args.out, cfg, "synth", {"n": args.n, "raw_frames": frames})
    print(manifest)


def cmd_preprocess(args, cfg):
    from .ingest import preprocess
    manifest = preprocess(args.manifest, args.out, cfg.arch(), cfg.diff_mode, args.workers)
    write_run_config(args.out, cfg, "preprocess")
    print(manifest)


def cmd_partition(args, cfg):
    from .ingest import read_manifest, write_manifest
    from .federated import partition_records
    records, shards = partition_records(read_manifest(args.manifest), cfg.clients, cfg.seed, args.allow_small)
    out = args.out or args.manifest
    # keep relative sample paths valid from the output location
    src_dir = os.path.dirname(os.path.abspath(args.manifest))
    dst_dir = os.path.dirname(os.path.abspath(out))
    for r in records:
        r.path = os.path.relpath(os.path.join(src_dir, r.path), dst_dir)
    write_manifest(out, records)
    for sh in shards:
        print(f"{sh.client_id}\tn={len(sh)}\tpos={sh.n_pos}\tneg={sh.n_neg}")


def _load(manifest, cfg):
    from .ingest import load_dataset
    return load_dataset(manifest, cfg.arch(), cfg.diff_mode)


def cmd_lr_find(args, cfg):
    from . import autodiff as ad
    from . import rng as rngmod
    from .model import build_model
    from .schedule import lr_range_test
    data = _load(args.manifest, cfg)
    model = build_model(cfg.arch(), seed=cfg.seed)
    order = rngmod.stream(cfg.seed, rngmod.SWEEP).permutation(len(data))
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(data), cfg.batch_size)]
    drop = rngmod.stream(cfg.seed, rngmod.SWEEP, rngmod.DROPOUT)

    def loss_fn(m, idx, step):
        return ad.bce_with_logits(m.forward(data.rgb[idx], data.diff[idx], training=True, rng=drop),
                                  data.labels[idx])

    res = lr_range_test(model, batches, loss_fn, args.steps, args.lr_lo, args.lr_hi, args.beta, cfg.momentum)
    os.makedirs(args.out, exist_ok=True)
    fgt.atomic_write(os.path.join(args.out, "sweep.csv"), res.to_csv())
    summary = f"suggested_min_lr={res.suggested_min_lr!r}\nsuggested_max_lr={res.suggested_max_lr!r}\n" \
              f"points={len(res.lrs)}\naborted_at={res.aborted_at}\n"
    fgt.atomic_write(os.path.join(args.out, "suggestion.txt"), summary)
    write_run_config(args.out, cfg, "lr-find", {"steps": args.steps, "lr_lo": args.lr_lo, "lr_hi": args.lr_hi})
    print(summary, end="")


def _write_eval(out, report, prefix="eval"):
    fgt.atomic_write(os.path.join(out, f"{prefix}.txt"), report.to_text())
    fgt.atomic_write(os.path.join(out, f"{prefix}_roc.csv"), report.roc_csv())


def cmd_train(args, cfg):
    from .federated import evaluate, train_centralized
    from .model import save_checkpoint
    data = _load(args.manifest, cfg)
    model = train_centralized(cfg.arch(), data, cfg.epochs, cfg.batch_size, cfg.lr_max, cfg.lr_min or None,
                              cfg.momentum, cfg.seed, clip_norm=cfg.clip_norm or None)
    save_checkpoint(os.path.join(args.out, "checkpoint"), model.get_params(), cfg.arch())
    write_run_config(args.out, cfg, "train")
    if args.val:
        rep = evaluate(model, _load(args.val, cfg))
        _write_eval(args.out, rep)
        print(rep.to_text(), end="")


def _shards_and_data(args, cfg):
    from .federated import shards_from_records, stratified_partition
    from .ingest import read_manifest
    data = _load(args.manifest, cfg)
    records = read_manifest(args.manifest)
    if all(r.client_id is not None for r in records):
        shards = shards_from_records(records)
    else:
        shards = stratified_partition(data.ids, data.labels, cfg.clients, cfg.seed)
    return shards, data


class _RoundLog:
    def __init__(self, path):
        self.path = path
        self.lines = []

    def __call__(self, report):
        self.lines.append(report.to_line() + "\n")
        fgt.atomic_write(self.path, "".join(self.lines))
        print(report.to_line(), flush=True)


def cmd_fed_train(args, cfg):
    from .federated import fed_train
    from .model import save_checkpoint
    shards, data = _shards_and_data(args, cfg)
    val = _load(args.val, cfg)
    fed = cfg.fed()
    fed.n_clients = len(shards)
    os.makedirs(args.out, exist_ok=True)
    write_run_config(args.out, cfg, "fed-train", {"clients_resolved": len(shards)})
    client_data = {sh.client_id: data.subset(sh.sample_ids) for sh in shards}
    _, final = fed_train(fed, cfg.arch(), shards, val, client_data=client_data,
                         on_round=_RoundLog(os.path.join(args.out, "rounds.log")))
    save_checkpoint(os.path.join(args.out, "checkpoint"), final, cfg.arch())


def cmd_fed_serve(args, cfg):
    from .model import save_checkpoint
    from .transport import serve
    shards, _ = _shards_and_data(args, cfg)
    val = _load(args.val, cfg)
    fed = cfg.fed()
    fed.n_clients = len(shards)
    os.makedirs(args.out, exist_ok=True)
    write_run_config(args.out, cfg, "fed-serve", {"bind": args.bind})
    _, final = serve(args.bind, fed, cfg.arch(), shards, val, timeout=args.timeout,
                     on_round=_RoundLog(os.path.join(args.out, "rounds.log")))
    save_checkpoint(os.path.join(args.out, "checkpoint"), final, cfg.arch())


def cmd_fed_client(args, cfg):
    from .transport import connect_client
    shards, data = _shards_and_data(args, cfg)
    mine = [sh for sh in shards if sh.client_id == args.client_id]
    if not mine:
        raise DataError(f"client id {args.client_id!r} not found in {args.manifest}")
    rounds = connect_client(args.connect, args.client_id, cfg.arch(), data.subset(mine[0].sample_ids),
                            timeout=args.timeout)
    print(f"{args.client_id}: trained {rounds} rounds")


def cmd_eval(args, cfg):
    from .config import parse_kv
    from .federated import evaluate
    from .model import build_model, load_checkpoint
    arch_path = os.path.join(args.checkpoint, "arch.cfg")
    if os.path.exists(arch_path):
        with open(arch_path, encoding="utf-8") as f:
            stored = parse_kv(f.read(), arch_path)
        stored.pop("blocks_per_channel", None)
        stored.pop("motion_channels", None)
        cfg.update(stored, arch_path)
    mp = load_checkpoint(args.checkpoint)
    model = build_model(cfg.arch(), init="zeros")
    model.set_params(mp)
    rep = evaluate(model, _load(args.manifest, cfg))
    os.makedirs(args.out, exist_ok=True)
    _write_eval(args.out, rep)
    write_run_config(args.out, cfg, "eval", {"checkpoint": args.checkpoint})
    print(rep.to_text(), end="")


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="fedgate", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"fedgate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[parent], help="generate a synthetic motion dataset")
    p.add_argument("--n", type=int, required=True, help="total clips (even; half per class)")
    p.add_argument("--raw-frames", type=int, default=None, help="raw frames per clip (default frames+1)")
    p.add_argument("--prefix", default="synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[parent], help="frame directories -> FGT1 input pairs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("partition", parents=[parent], help="stratified client split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output manifest (default: rewrite in place)")
    p.add_argument("--allow-small", action="store_true", help="permit more clients than samples per class")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("lr-find", parents=[parent], help="learning-rate range test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr-lo", type=float, default=1e-15)
    p.add_argument("--lr-hi", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.98)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lr_find)

    p = sub.add_parser("train", parents=[parent], help="centralized one-cycle training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("fed-train", cmd_fed_train, "in-process federated training"),
                              ("fed-serve", cmd_fed_serve, "federated server over TCP")):
        p = sub.add_parser(name, parents=[parent], help=help_)
        p.add_argument("--manifest", required=True, help="training manifest, partitioned or not")
        p.add_argument("--val", required=True)
        p.add_argument("--out", required=True)
        if name == "fed-serve":
            p.add_argument("--bind", default="127.0.0.1:7415")
            p.add_argument("--timeout", type=float, default=None, help="seconds (env FEDGATE_TIMEOUT_SECS)")
        p.set_defaults(func=func)

    p = sub.add_parser("fed-client", parents=[parent], help="federated client over TCP")
    p.add_argument("--connect", default="127.0.0.1:7415")
    p.add_argument("--manifest", required=True)
    p.add_argument("--client-id", required=True)
    p.add_argument("--timeout", type=float, default=None)
    p.set_defaults(func=cmd_fed_client)

    p = sub.add_parser("eval", parents=[parent], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except FedgateError as exc:
        print(f"fedgate {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"fedgate {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

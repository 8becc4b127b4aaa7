"""Flat ``key=value`` run configuration.

One entry per line, ``#`` starts a comment. Unknown keys are rejected.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def dump_kv(mapping):
    return "".join(f"{k}={_fmt(v)}\n" for k, v in mapping.items())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def _as_bool(s):
    s = str(s).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # architecture
    frames: int = 8
    height: int = 24
    width: int = 24
    channel_widths: str = "8,16"
    fc_width: int = 32
    dropout_p: float = 0.5
    temporal_pool_window: int = 2
    # federation
    clients: int = 4
    rounds: int = 4
    participation: str = "all"
    sample_fraction: float = 0.5
    local_epochs: int = 6
    # optimisation
    epochs: int = 6
    batch_size: int = 2
    lr_max: float = 0.04
    lr_min: float = 0.0  # 0 means lr_max / 25
    momentum: float = 0.9
    clip_norm: float = 5.0  # 0 disables gradient clipping
    seed: int = 0
    sequential: bool = True
    diff_mode: str = "signed"

    def arch(self):
        from .model import ArchConfig
        widths = [int(w) for w in str(self.channel_widths).split(",") if w.strip()]
        return ArchConfig(frames=self.frames, height=self.height, width=self.width,
                          blocks_per_channel=len(widths), channel_widths=widths,
                          fc_width=self.fc_width, dropout_p=self.dropout_p,
                          temporal_pool_window=self.temporal_pool_window)

    def fed(self):
        from .federated import FedConfig
        return FedConfig(n_clients=self.clients, rounds=self.rounds, participation=self.participation,
                         sample_fraction=self.sample_fraction, local_epochs=self.local_epochs,
                         batch_size=self.batch_size, lr_max=self.lr_max, lr_min=self.lr_min or None,
                         momentum=self.momentum, seed=self.seed, sequential=self.sequential,
                         clip_norm=self.clip_norm or None)

    def update(self, mapping, source="<config>"):
        known = {f.name: f for f in fields(self)}
        for key, value in mapping.items():
            if value is None:
                continue
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            kind = known[key].type
            try:
                if kind in ("int", int):
                    value = int(value)
                elif kind in ("float", float):
                    value = float(value)
                elif kind in ("bool", bool):
                    value = value if isinstance(value, bool) else _as_bool(value)
                else:
                    value = str(value)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
            setattr(self, key, value)
        return self

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls().update(parse_kv(f.read(), str(path)), str(path))

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self):
        return dump_kv(self.to_dict())

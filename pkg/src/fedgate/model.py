"""Two-stream gated video classifier with a frame-difference motion stream.

Structure (every conv block is a pseudo-3D depthwise-separable conv):

    rgb  [N,3,T,H,W] -> blocks (conv, ReLU, spatial pool) ------------------+
    diff [N,1,T,H,W] -> blocks (last block: conv, pool, sigmoid) --> gate --*--> temporal max-pool
        -> merging block (conv, ReLU, 2x2x2 pool) -> flatten
        -> dense(fc_width) -> ReLU -> dropout -> dense(1) = logit
"""

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import fgt, rng as rngmod
from .errors import ConfigError, DimensionError, FormatError, IncompatibleModelError

BLOCK_POOL = (1, 2, 2)
MERGE_POOL = (2, 2, 2)
KERNEL = 3


@dataclass
class ArchConfig:
    frames: int = 8
    height: int = 24
    width: int = 24
    blocks_per_channel: int = 2
    channel_widths: list = field(default_factory=lambda: [8, 16])
    fc_width: int = 32
    dropout_p: float = 0.5
    temporal_pool_window: int = 2
    motion_channels: int = 1  # 2 reproduces an optical-flow style motion input

    def __post_init__(self):
        self.channel_widths = [int(w) for w in self.channel_widths]
        for name in ("frames", "height", "width", "blocks_per_channel", "fc_width",
                     "temporal_pool_window", "motion_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if len(self.channel_widths) != self.blocks_per_channel:
            raise ConfigError(
                f"channel_widths has {len(self.channel_widths)} entries but blocks_per_channel={self.blocks_per_channel}")
        if any(w < 1 for w in self.channel_widths):
            raise ConfigError(f"channel widths must be positive: {self.channel_widths}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def feature_shapes(self):
        """(stage, (T, H, W)) after every pooling stage; raises if any extent drops below 1."""
        t, h, w = self.frames, self.height, self.width
        stages = []

        def pool(stage, window, t, h, w):
            out = []
            for ax, size, win in zip("THW", (t, h, w), window):
                if size < win:
                    raise DimensionError(
                        f"pooling at stage {stage!r} collapses axis {ax}: extent {size} < window {win}")
                out.append(size // win)
            stages.append((stage, tuple(out)))
            return out

        for b in range(self.blocks_per_channel):
            t, h, w = pool(f"channel block {b}", BLOCK_POOL, t, h, w)
        t, h, w = pool("merge temporal pool", (self.temporal_pool_window, 1, 1), t, h, w)
        pool("merging block", MERGE_POOL, t, h, w)
        return stages

    def flat_features(self):
        t, h, w = self.feature_shapes()[-1][1]
        return self.channel_widths[-1] * t * h * w

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, list) else v
        return out


@dataclass(frozen=True)
class ModelParams:
    """Immutable flat snapshot of every parameter plus the layout it follows."""

    layout: tuple  # ((name, shape), ...)
    values: np.ndarray
    layout_digest: int

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if expected != self.values.size:
            raise DimensionError(f"layout describes {expected} values, vector has {self.values.size}")
        self.values.flags.writeable = False

    @classmethod
    def from_layout(cls, layout, values):
        layout = tuple((n, tuple(int(d) for d in s)) for n, s in layout)
        values = np.array(values, dtype=np.float32).reshape(-1)
        return cls(layout, values, layout_digest(layout))

    def unflatten(self):
        out, pos = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[pos:pos + size].reshape(shape)
            pos += size
        return out

    def layout_text(self):
        return layout_text(self.layout)

    def with_values(self, values):
        values = np.array(values, dtype=np.float32).reshape(-1)
        return ModelParams(self.layout, values, self.layout_digest)


def layout_text(layout):
    return "".join(f"{name} {' '.join(str(d) for d in shape)}\n" for name, shape in layout)


def layout_digest(layout):
    """64-bit BLAKE2b checksum of the layout description."""
    h = hashlib.blake2b(layout_text(layout).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def _block_layout(prefix, c_in, c_out):
    k = KERNEL
    return [
        (f"{prefix}.spatial.w", (c_in, 1, 1, k, k)),
        (f"{prefix}.spatial.b", (c_in,)),
        (f"{prefix}.temporal.w", (c_in, 1, k, 1, 1)),
        (f"{prefix}.temporal.b", (c_in,)),
        (f"{prefix}.point.w", (c_out, c_in, 1, 1, 1)),
        (f"{prefix}.point.b", (c_out,)),
    ]


def build_layout(cfg):
    layout = []
    for stream_name, c in (("rgb", 3), ("diff", cfg.motion_channels)):
        for b, width in enumerate(cfg.channel_widths):
            layout += _block_layout(f"{stream_name}.{b}", c, width)
            c = width
    last = cfg.channel_widths[-1]
    layout += _block_layout("merge", last, last)
    layout += [
        ("fc1.w", (cfg.fc_width, cfg.flat_features())),
        ("fc1.b", (cfg.fc_width,)),
        ("fc2.w", (1, cfg.fc_width)),
        ("fc2.b", (1,)),
    ]
    return tuple(layout)


def _fan_in(name, shape):
    if name.endswith(".w"):
        return int(np.prod(shape[1:]))
    return None


class DiffGatedModel:
    def __init__(self, cfg, rng=None, dtype=np.float32, init="uniform"):
        cfg.feature_shapes()  # validates extents
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.layout = build_layout(cfg)
        self.digest = layout_digest(self.layout)
        self.params = {}
        if init == "uniform" and rng is None:
            raise ConfigError("uniform initialization needs an rng")
        for name, shape in self.layout:
            fan_in = _fan_in(name, shape)
            if init == "zeros" or fan_in is None or name == "fc2.w":
                # output head starts at zero: untrained scores are exactly 0.5
                data = np.zeros(shape, dtype=self.dtype)
            else:
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
            self.params[name] = ad.Tensor(data, requires_grad=True, name=name)

    # -- parameter plumbing

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def count_params(self):
        return sum(p.data.size for p in self.params.values())

    def get_params(self):
        values = np.concatenate([p.data.astype(np.float32).reshape(-1) for p in self.params.values()])
        return ModelParams(self.layout, values, self.digest)

    def set_params(self, mp):
        if mp.layout_digest != self.digest:
            raise IncompatibleModelError(
                f"parameter layout digest {mp.layout_digest:016x} does not match model {self.digest:016x}")
        for name, arr in mp.unflatten().items():
            self.params[name].data = np.array(arr, dtype=self.dtype)
            self.params[name].grad = None

    # -- forward pieces

    def _block(self, prefix, x, activation):
        p = self.params
        y = ad.depthwise_separable_conv3d(
            x, p[f"{prefix}.spatial.w"], p[f"{prefix}.spatial.b"],
            p[f"{prefix}.temporal.w"], p[f"{prefix}.temporal.b"],
            p[f"{prefix}.point.w"], p[f"{prefix}.point.b"])
        if activation is not None:
            y = activation(y)
        return y

    def rgb_features(self, rgb):
        x = rgb
        for b in range(self.cfg.blocks_per_channel):
            x = ad.maxpool3d(self._block(f"rgb.{b}", x, ad.relu), BLOCK_POOL)
        return x

    def motion_logits(self, diff):
        """Motion-stream output before the gating sigmoid."""
        x = diff
        last = self.cfg.blocks_per_channel - 1
        for b in range(self.cfg.blocks_per_channel):
            x = ad.maxpool3d(self._block(f"diff.{b}", x, ad.relu if b < last else None), BLOCK_POOL)
        return x

    def merge(self, rgb_feat, motion_logits):
        """Gate appearance features by sigmoid(motion) and pool over time."""
        gated = ad.mul(ad.relu(rgb_feat), ad.sigmoid(motion_logits))
        return ad.maxpool3d(gated, (self.cfg.temporal_pool_window, 1, 1))

    def head(self, merged, training=False, rng=None):
        p = self.params
        x = ad.maxpool3d(self._block("merge", merged, ad.relu), MERGE_POOL)
        x = ad.flatten(x)
        x = ad.relu(ad.dense(x, p["fc1.w"], p["fc1.b"]))
        x = ad.dropout(x, self.cfg.dropout_p, rng, training)
        x = ad.dense(x, p["fc2.w"], p["fc2.b"])
        return ad.reshape(x, (x.shape[0],))

    def forward(self, rgb, diff, training=False, rng=None):
        rgb, diff = self._check_inputs(rgb, diff)
        return self.head(self.merge(self.rgb_features(rgb), self.motion_logits(diff)), training, rng)

    __call__ = forward

    def _check_inputs(self, rgb, diff):
        rgb = ad.as_tensor(rgb)
        diff = ad.as_tensor(diff)
        cfg = self.cfg
        want = (cfg.frames, cfg.height, cfg.width)
        if rgb.data.ndim != 5 or rgb.shape[1] != 3:
            raise DimensionError(f"rgb input must be [N,3,T,H,W], got {rgb.shape}")
        if diff.data.ndim != 5 or diff.shape[1] != cfg.motion_channels:
            raise DimensionError(f"motion input must be [N,{cfg.motion_channels},T,H,W], got {diff.shape}")
        for ax, a, b in zip("NTHW", (rgb.shape[0],) + rgb.shape[2:], (diff.shape[0],) + diff.shape[2:]):
            if a != b:
                raise DimensionError(f"rgb and motion inputs disagree on axis {ax}: {a} vs {b}")
        if rgb.shape[2:] != want:
            raise DimensionError(f"input extents {rgb.shape[2:]} do not match config (T,H,W)={want}")
        if rgb.dtype != self.dtype:
            rgb = ad.Tensor(rgb.data.astype(self.dtype))
        if diff.dtype != self.dtype:
            diff = ad.Tensor(diff.data.astype(self.dtype))
        return rgb, diff

    def predict(self, rgb, diff, batch_size=16):
        """Evaluation-mode sigmoid scores as a float64 vector."""
        scores = []
        for s in range(0, len(rgb), batch_size):
            z = self.forward(rgb[s:s + batch_size], diff[s:s + batch_size], training=False).data
            scores.append(ad._sigmoid(z.astype(np.float64)))
        return np.concatenate(scores) if scores else np.zeros(0)


def build_model(cfg, rng=None, seed=None, dtype=np.float32, init="uniform"):
    if rng is None and init == "uniform":
        rng = rngmod.stream(0 if seed is None else seed, rngmod.INIT)
    return DiffGatedModel(cfg, rng=rng, dtype=dtype, init=init)


def count_params(model):
    return model.count_params()


def block_param_count(c_in, c_out, k=KERNEL):
    """Separable block with biases on all three stages."""
    return (c_in * k * k + c_in) + (c_in * k + c_in) + (c_in * c_out + c_out)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(directory, mp, cfg=None):
    """Write ``model.layout`` (digest header + one ``name shape...`` line per entry)
    and ``model.params.fgt`` (flat FGT1 vector); ``arch.cfg`` too if a config is given."""
    import os
    os.makedirs(directory, exist_ok=True)
    fgt.atomic_write(os.path.join(directory, "model.layout"),
                     f"# digest {mp.layout_digest:016x}\n" + mp.layout_text())
    fgt.save(os.path.join(directory, "model.params.fgt"), mp.values)
    if cfg is not None:
        from .config import dump_kv
        fgt.atomic_write(os.path.join(directory, "arch.cfg"), dump_kv(cfg.to_dict()))


def load_checkpoint(directory):
    import os
    with open(os.path.join(directory, "model.layout"), encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("# digest "):
        raise FormatError(f"{directory}: layout file lacks a digest header")
    digest = int(lines[0].split()[2], 16)
    layout = []
    for line in lines[1:]:
        if line.strip():
            name, *dims = line.split()
            layout.append((name, tuple(int(d) for d in dims)))
    mp = ModelParams.from_layout(layout, fgt.load(os.path.join(directory, "model.params.fgt")))
    if mp.layout_digest != digest:
        raise IncompatibleModelError(f"{directory}: stored digest {digest:016x} != recomputed {mp.layout_digest:016x}")
    return mp

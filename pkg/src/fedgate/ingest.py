"""Frame loading, frame differences, input shaping and the synthetic motion dataset."""

import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import fgt, rng as rngmod
from .errors import ConfigError, DataError, FormatError

FRAME_RE = re.compile(r"^frame_(\d{5})\.ppm$")


@dataclass
class VideoSample:
    id: str
    frames: np.ndarray  # [F, 3, H, W] float32 in [0, 1]
    label: int
    source: str = "synthetic"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise FormatError(f"{self.id}: frames must be [F,3,H,W], got {self.frames.shape}")
        if self.frames.shape[0] < 2:
            raise FormatError(f"{self.id}: need at least 2 frames, got {self.frames.shape[0]}")
        if self.label not in (0, 1):
            raise FormatError(f"{self.id}: label must be 0 or 1, got {self.label}")


# ------------------------------------------------------------------ PPM I/O

def read_ppm(path):
    with open(path, "rb") as f:
        if f.read(2) != b"P6":
            raise FormatError(f"{path}: not a binary PPM (P6) file")
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise FormatError(f"{path}: unsupported PPM mode {img.mode}")
        return np.asarray(img, dtype=np.uint8)


def write_ppm(path, rgb_u8):
    Image.fromarray(np.ascontiguousarray(rgb_u8, dtype=np.uint8)).save(path, format="PPM")


def load_frames(directory):
    """Read ``frame_00000.ppm``, ``frame_00001.ppm``, ... into [F,3,H,W] floats in [0,1]."""
    indexed = {}
    for name in os.listdir(directory):
        m = FRAME_RE.match(name)
        if m:
            indexed[int(m.group(1))] = name
    if not indexed:
        raise FormatError(f"{directory}: no frame_NNNNN.ppm files")
    for expect in range(max(indexed) + 1):
        if expect not in indexed:
            raise FormatError(f"{directory}: gap in frame sequence, frame_{expect:05d}.ppm is missing")
    if len(indexed) < 2:
        raise FormatError(f"{directory}: need at least 2 frames for differences, found 1")
    frames = [read_ppm(os.path.join(directory, indexed[i])) for i in range(len(indexed))]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: frames differ in size: {sorted(shapes)}")
    arr = np.stack(frames).astype(np.float32) / np.float32(255)
    return arr.transpose(0, 3, 1, 2).copy()


def save_frames(directory, frames):
    os.makedirs(directory, exist_ok=True)
    u8 = np.rint(np.clip(frames, 0, 1) * 255).astype(np.uint8).transpose(0, 2, 3, 1)
    for i, fr in enumerate(u8):
        write_ppm(os.path.join(directory, f"frame_{i:05d}.ppm"), fr)


# ------------------------------------------------------------ preprocessing

def grayscale(frames):
    return frames.mean(axis=1, dtype=np.float32)


def frame_difference(frames, mode="signed"):
    """[T+1,3,H,W] -> [1,T,H,W]: difference of consecutive RGB-mean gray frames.

    ``mode="signed"`` keeps gray[t+1] - gray[t] in [-1, 1]; ``"absolute"``
    takes its magnitude.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise FormatError(f"frame_difference needs [F>=2,3,H,W], got {frames.shape}")
    gray = grayscale(frames)
    d = gray[1:] - gray[:-1]
    if mode == "absolute":
        d = np.abs(d)
    elif mode != "signed":
        raise ConfigError(f"unknown difference mode {mode!r}")
    return d[None]


def temporal_indices(raw, frames):
    """Indices of ``frames + 1`` uniformly spaced raw frames: floor(i*(raw-1)/frames)."""
    if raw < frames + 1:
        raise DataError(f"sample has {raw} frames, need at least {frames + 1}")
    return [i * (raw - 1) // frames for i in range(frames + 1)]


def crop_resize(frames, height, width):
    """Center-crop to the target aspect ratio, then nearest-neighbour resize."""
    _, _, h, w = frames.shape
    if h < height or w < width:
        raise DataError(f"frame size {h}x{w} is smaller than target {height}x{width}")
    ch, cw = h, h * width // height
    if cw > w:
        cw, ch = w, w * height // width
    top, left = (h - ch) // 2, (w - cw) // 2
    rows = top + np.arange(height) * ch // height
    cols = left + np.arange(width) * cw // width
    return frames[:, :, rows[:, None], cols[None, :]]


def make_input(sample, cfg, mode="signed"):
    frames = sample.frames if isinstance(sample, VideoSample) else np.asarray(sample)
    idx = temporal_indices(frames.shape[0], cfg.frames)
    clip = crop_resize(frames[idx], cfg.height, cfg.width).astype(np.float32)
    rgb = clip[:-1].transpose(1, 0, 2, 3).copy()
    return rgb, frame_difference(clip, mode)


# ---------------------------------------------------------------- datasets

@dataclass
class ArrayDataset:
    ids: list
    rgb: np.ndarray  # [N,3,T,H,W]
    diff: np.ndarray  # [N,1,T,H,W]
    labels: np.ndarray  # [N] int

    def __len__(self):
        return len(self.ids)

    def subset(self, ids):
        """Rows for ``ids``, kept in this dataset's order."""
        wanted = set(ids)
        missing = wanted.difference(self.ids)
        if missing:
            raise DataError(f"unknown sample ids: {sorted(missing)[:5]}")
        rows = [i for i, s in enumerate(self.ids) if s in wanted]
        return ArrayDataset([self.ids[i] for i in rows], self.rgb[rows], self.diff[rows], self.labels[rows])


def to_dataset(samples, cfg, mode="signed"):
    pairs = [make_input(s, cfg, mode) for s in samples]
    return ArrayDataset(
        [s.id for s in samples],
        np.stack([p[0] for p in pairs]).astype(np.float32),
        np.stack([p[1] for p in pairs]).astype(np.float32),
        np.array([s.label for s in samples], dtype=np.int64),
    )


# ---------------------------------------------------------------- synthetic

def _render(h, w, background, blobs):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = background.copy()
    for (cy, cx), radius, color in blobs:
        a = np.clip(1.5 - np.hypot(yy - cy, xx - cx) / radius, 0, 1)[None]
        img = img * (1 - a) + color[:, None, None] * a
    return img


def _step(pos, vel, h, w):
    pos = pos + vel
    for ax, lim in ((0, h - 1), (1, w - 1)):
        if pos[ax] < 0:
            pos[ax], vel[ax] = -pos[ax], -vel[ax]
        elif pos[ax] > lim:
            pos[ax], vel[ax] = 2 * lim - pos[ax], -vel[ax]
    return pos, vel


def synth_sample(label, frames, h, w, rng, sample_id):
    """One clip of ``frames`` raw frames. Values are multiples of 1/255 so PPM export is lossless."""
    background = rng.uniform(0.05, 0.35, size=3)[:, None, None] + rng.uniform(-0.04, 0.04, size=(3, h, w))
    radius = max(1.5, min(h, w) / 8)
    if label == 0:
        pos = rng.uniform([0, 0], [h - 1, w - 1])
        angle = rng.uniform(0, 2 * np.pi)
        vel = rng.uniform(0.2, 0.6) * np.array([np.sin(angle), np.cos(angle)])
        color = rng.uniform(0.5, 1.0, size=3)
        states = [[pos, vel, color]]
    else:
        states = []
        for _ in range(2):
            angle = rng.uniform(0, 2 * np.pi)
            states.append([rng.uniform([0, 0], [h - 1, w - 1]),
                           rng.uniform(2.0, 3.5) * np.array([np.sin(angle), np.cos(angle)]),
                           rng.uniform(0.5, 1.0, size=3)])
    clip = []
    for t in range(frames):
        blobs = [(s[0], radius, s[2]) for s in states]
        clip.append(_render(h, w, background, blobs))
        for i, s in enumerate(states):
            if label == 1:
                # head toward the other blob with a random turn, producing contact and recoil
                other = states[1 - i][0]
                speed = np.hypot(*s[1])
                toward = np.arctan2(*(other - s[0])) + rng.normal(0, 1.2)
                s[1] = speed * np.array([np.sin(toward), np.cos(toward)])
            s[0], s[1] = _step(s[0], s[1], h, w)
    u8 = np.rint(np.clip(np.stack(clip), 0, 1) * 255).astype(np.float32)
    return VideoSample(sample_id, u8 / np.float32(255), int(label))


def synth_dataset(n_per_class, frames, height, width, seed, prefix="synth"):
    """Balanced list of ``2 * n_per_class`` synthetic clips with ``frames`` raw frames each.

    Class 0 is one blob drifting slowly on a straight line; class 1 is two
    fast blobs that keep turning toward each other and collide.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if height < 8 or width < 8:
        raise ConfigError(f"synthetic clips need H, W >= 8, got {height}x{width}")
    if frames < 2:
        raise ConfigError(f"synthetic clips need at least 2 frames, got {frames}")
    order = rngmod.stream(seed, rngmod.SYNTH, 0).permutation(2 * n_per_class)
    labels = (order >= n_per_class).astype(int)
    return [
        synth_sample(int(lab), frames, height, width, rngmod.stream(seed, rngmod.SYNTH, 1, i),
                     f"{prefix}_{i:05d}")
        for i, lab in enumerate(labels)
    ]


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    path: str
    label: int
    client_id: str = None


def read_manifest(path):
    records, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise FormatError(f"{path}:{lineno}: expected <path>\\t<label>[\\t<client_id>]")
            if parts[1] not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {parts[1]!r}")
            if parts[0] in seen:
                raise FormatError(f"{path}:{lineno}: duplicate sample path {parts[0]!r}")
            seen.add(parts[0])
            cid = parts[2] if len(parts) == 3 and parts[2] else None
            records.append(ManifestRecord(parts[0], int(parts[1]), cid))
    return records


def write_manifest(path, records):
    lines = []
    for r in records:
        cols = [r.path, str(r.label)] + ([r.client_id] if r.client_id is not None else [])
        lines.append("\t".join(cols) + "\n")
    fgt.atomic_write(path, "".join(lines))


def sample_id(record):
    return os.path.basename(os.path.normpath(record.path))


def write_synth(directory, samples):
    """Export clips as frame directories plus ``manifest.tsv``."""
    os.makedirs(directory, exist_ok=True)
    for s in samples:
        save_frames(os.path.join(directory, s.id), s.frames)
    manifest = os.path.join(directory, "manifest.tsv")
    write_manifest(manifest, [ManifestRecord(s.id, s.label) for s in samples])
    return manifest


def _preprocess_one(args):
    base, rec, out_dir, cfg, mode = args
    src = os.path.join(base, rec.path)
    frames = load_frames(src)
    rgb, diff = make_input(frames, cfg, mode)
    sid = sample_id(rec)
    fgt.save(os.path.join(out_dir, f"{sid}.rgb.fgt"), rgb)
    fgt.save(os.path.join(out_dir, f"{sid}.diff.fgt"), diff)
    return ManifestRecord(sid, rec.label, rec.client_id)


def preprocess(manifest_path, out_dir, cfg, mode="signed", workers=1):
    """Turn frame directories into ``<id>.rgb.fgt`` / ``<id>.diff.fgt`` pairs and a new manifest."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.dirname(os.path.abspath(manifest_path))
    jobs = [(base, r, out_dir, cfg, mode) for r in read_manifest(manifest_path)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(_preprocess_one, jobs))
    else:
        out = [_preprocess_one(j) for j in jobs]
    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest, out)
    return manifest


def load_dataset(manifest_path, cfg, mode="signed"):
    """Load preprocessed FGT1 pairs, or preprocess frame directories on the fly."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    ids, rgbs, diffs, labels = [], [], [], []
    for rec in read_manifest(manifest_path):
        p = os.path.join(base, rec.path)
        if os.path.isdir(p):
            rgb, diff = make_input(load_frames(p), cfg, mode)
        elif os.path.exists(p + ".rgb.fgt"):
            rgb, diff = fgt.load(p + ".rgb.fgt"), fgt.load(p + ".diff.fgt")
        else:
            raise DataError(f"{manifest_path}: no frame directory or FGT1 pair at {rec.path!r}")
        want = (cfg.frames, cfg.height, cfg.width)
        if rgb.shape != (3,) + want or diff.shape != (1,) + want:
            raise DataError(f"{rec.path}: preprocessed shapes {rgb.shape}/{diff.shape} do not match config {want}")
        ids.append(sample_id(rec))
        rgbs.append(rgb)
        diffs.append(diff)
        labels.append(rec.label)
    if not ids:
        raise DataError(f"{manifest_path}: empty manifest")
    return ArrayDataset(ids, np.stack(rgbs), np.stack(diffs), np.array(labels, dtype=np.int64))

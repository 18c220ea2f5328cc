"""Synthetic single-object videos: a drifting, deforming bright ellipse over a
sinusoidal background, with exact masks, PGM storage and split manifest."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    num_videos: int = 50
    frames: int = 16
    size: int = 64
    seed: int = 0
    amplitude: float = 1.5
    radius_min: float = 6.0
    radius_max: float = 14.0
    deform: float = 0.15
    noise: float = 0.05
    fractions: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if self.num_videos < 0 or self.frames < 1 or self.size < 1:
            raise ConfigError("num_videos >= 0, frames >= 1 and size >= 1 required")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"bad radius range {self.radius_min}..{self.radius_max}")
        if self.radius_max * (1 + self.deform) >= self.size / 3:
            raise ConfigError(f"radius_max {self.radius_max} too large for size {self.size}")
        if self.amplitude < 0 or self.deform < 0 or self.noise < 0:
            raise ConfigError("amplitude, deform and noise must be non-negative")
        check_fractions(self.fractions)

    def to_dict(self):
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "fractions": tuple(d["fractions"])})


@dataclass
class VideoSample:
    id: str
    frames: np.ndarray  # [T,S,S] float64 in [0,1], multiples of 1/255
    masks: np.ndarray  # [T,S,S] bool
    split: str = "train"
    centers: np.ndarray = field(default=None, repr=False)  # [T,2] (x,y), generation only

    def __len__(self):
        return len(self.frames)


def check_fractions(fractions):
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three non-negative split fractions, got {fractions}")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")


def ellipse_mask(size, cx, cy, a, b, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def gen_video(cfg, video_seed, video_id=None):
    rng = np.random.default_rng(video_seed)
    s, t_len = cfg.size, cfg.frames
    a0, b0 = rng.uniform(cfg.radius_min, cfg.radius_max, size=2)
    theta0 = rng.uniform(0.0, math.pi)
    spin = cfg.deform * rng.uniform(-0.3, 0.3)
    omega = rng.uniform(0.2, 0.6, size=2)
    margin = max(a0, b0) * (1.0 + cfg.deform) + 1.0
    lo, hi = margin, s - 1 - margin
    center = rng.uniform(lo, hi, size=2)
    heading = rng.uniform(0.0, 2.0 * math.pi)
    vel = cfg.amplitude * rng.uniform(0.5, 1.0) * np.array([math.cos(heading), math.sin(heading)])

    fx, fy = rng.uniform(1.0, 4.0, size=2) * rng.choice([-1.0, 1.0], size=2)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    texture = 0.5 + 0.5 * np.sin(2.0 * math.pi * (fx * xx + fy * yy) / s + phase)

    frames = np.empty((t_len, s, s))
    masks = np.empty((t_len, s, s), dtype=bool)
    centers = np.empty((t_len, 2))
    for t in range(t_len):
        if t > 0:
            vel = 0.8 * vel + 0.2 * cfg.amplitude * rng.normal(size=2)
            speed = float(np.hypot(*vel))
            if speed > cfg.amplitude:
                vel *= cfg.amplitude / speed
            center = center + vel
            for k in range(2):
                if center[k] < lo:
                    center[k], vel[k] = 2 * lo - center[k], -vel[k]
                elif center[k] > hi:
                    center[k], vel[k] = 2 * hi - center[k], -vel[k]
        a = a0 * (1.0 + cfg.deform * math.sin(omega[0] * t))
        b = b0 * (1.0 + cfg.deform * math.sin(omega[1] * t))
        mask = ellipse_mask(s, center[0], center[1], a, b, theta0 + spin * t)
        img = 0.8 * mask + 0.3 * texture
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise, size=img.shape)
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        masks[t] = mask
        centers[t] = center
    return VideoSample(video_id or f"video_{video_seed:04d}", frames, masks, "train", centers)


def gen_dataset(cfg):
    samples = [gen_video(cfg, cfg.seed ^ i, f"video_{i:04d}") for i in range(cfg.num_videos)]
    return split_dataset(samples, cfg.fractions, cfg.seed)


def split_counts(n, fractions):
    """Floor each share, hand the remainder to the largest fractional parts,
    then make every positive-fraction split nonempty."""
    check_fractions(fractions)
    raw = [round(f * n, 9) for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    wanted = [i for i in range(3) if fractions[i] > 0]
    if n < len(wanted):
        raise ConfigError(f"splits empty: {n} videos cannot fill {len(wanted)} nonempty splits")
    for i in wanted:
        if counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def split_dataset(samples, fractions=(0.7, 0.1, 0.2), seed=0):
    counts = split_counts(len(samples), fractions)
    order = np.random.default_rng(seed).permutation(len(samples))
    tags = [name for name, c in zip(SPLITS, counts) for _ in range(c)]
    for pos, idx in enumerate(order):
        samples[idx].split = tags[pos]
    return samples


def by_split(samples, split):
    return [s for s in samples if s.split == split]


# ---------------------------------------------------------------- PGM


def write_pgm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_pgm(path):
    """Binary 8-bit PGM (P5) to a uint8 array [H,W]."""
    return _read_pgm(Path(path))[0]


def _read_pgm(path):
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read file ({exc.strerror})") from None
    if raw[:2] != b"P5":
        raise ParseError(path, 0, "missing P5 magic")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(path, pos, "truncated or malformed header")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError(path, pos, "header not terminated by whitespace")
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(path, pos, f"unsupported maxval {maxval}")
    need = w * h
    if len(raw) - pos < need:
        raise ParseError(path, len(raw), f"pixel data truncated: expected {need} bytes, got {len(raw) - pos}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy(), pos


# ---------------------------------------------------------------- dataset dir


def write_dataset(samples, directory, gen_config=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": FORMAT_VERSION,
        "gen_config": gen_config.to_dict() if gen_config is not None else None,
        "videos": [{"id": s.id, "split": s.split, "num_frames": len(s)} for s in samples],
    }
    for s in samples:
        fdir = directory / s.id / "frames"
        mdir = directory / s.id / "masks"
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        for t in range(len(s)):
            write_pgm(fdir / f"{t:04d}.pgm", np.round(s.frames[t] * 255.0))
            write_pgm(mdir / f"{t:04d}.pgm", s.masks[t].astype(np.uint8) * 255)
    with open(directory / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(directory):
    path = Path(directory) / "dataset.json"
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read manifest ({exc.strerror})") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, exc.msg) from None
    if manifest.get("version") != FORMAT_VERSION:
        raise ParseError(path, 0, f"unsupported dataset version {manifest.get('version')!r}")
    return manifest


def read_dataset(directory, splits=None):
    directory = Path(directory)
    manifest = read_manifest(directory)
    samples = []
    for entry in manifest["videos"]:
        if splits is not None and entry["split"] not in splits:
            continue
        frames, masks = [], []
        for t in range(entry["num_frames"]):
            frames.append(read_pgm(directory / entry["id"] / "frames" / f"{t:04d}.pgm"))
            mpath = directory / entry["id"] / "masks" / f"{t:04d}.pgm"
            m, offset = _read_pgm(mpath)
            bad = np.flatnonzero((m != 0) & (m != 255))
            if bad.size:
                raise ParseError(mpath, offset + int(bad[0]), "mask pixel is neither 0 nor 255")
            masks.append(m == 255)
        samples.append(VideoSample(entry["id"], np.stack(frames) / 255.0, np.stack(masks), entry["split"]))
    return samples


def motion_self_test(samples):
    """(copy-first-mask Dice, true-motion rigid Dice), averaged over frames 1..T-1.

    The second number shifts the first mask by the rounded true centre
    displacement, so it isolates how much the shape deforms.
    """
    from .metrics import dice

    copy_scores, rigid_scores = [], []
    for s in samples:
        for t in range(1, len(s)):
            copy_scores.append(dice(s.masks[0], s.masks[t]))
            dx, dy = np.round(s.centers[t] - s.centers[0]).astype(int)
            rigid_scores.append(dice(shift_mask(s.masks[0], dx, dy), s.masks[t]))
    return float(np.mean(copy_scores)), float(np.mean(rigid_scores))


def shift_mask(mask, dx, dy):
    """Translate by integer (dx, dy); pixels leaving the frame are dropped."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    src_y = slice(max(-dy, 0), min(h - dy, h))
    src_x = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[src_y, src_x]
    return out

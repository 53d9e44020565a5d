"""Moving-shape video generator with per-pixel instance masks, and its file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "triangle")
PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.20, 0.35, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.30, 0.10],
        [0.95, 0.95, 0.95],
        [0.50, 0.10, 0.60],
    ]
)

DATASET_MAGIC = b"SRLVIDS\x00"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    T: int = 4
    H: int = 56
    W: int = 56
    min_objects: int = 2
    max_objects: int = 4
    shapes: tuple = SHAPES
    min_size: float = 10.0
    max_size: float = 14.0
    max_speed: float = 3.0
    min_speed: float = 0.0
    palette_size: int = 8
    background_level: float = 0.25
    texture_amplitude: float = 0.08
    occlusion: bool = True
    patch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.H % self.patch_size or self.W % self.patch_size:
            raise ValueError(f"H={self.H}, W={self.W} must be divisible by patch size {self.patch_size}")
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError(f"object count range [{self.min_objects}, {self.max_objects}] invalid")
        if 2 * self.max_size > min(self.H, self.W):
            raise ValueError(f"object size {self.max_size} does not fit in a {self.H}x{self.W} frame")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        if not 1 <= self.palette_size <= len(PALETTE):
            raise ValueError(f"palette_size must be in [1, {len(PALETTE)}]")


@dataclass
class VideoSample:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    gt_masks: np.ndarray  # [T, H, W] uint16, 0 = background
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_objects(self) -> int:
        return int(self.meta.get("num_objects", self.gt_masks.max()))


def value_noise(rng: np.random.Generator, h: int, w: int, cells: int = 7) -> np.ndarray:
    """Bilinearly upsampled random lattice in [-1, 1]."""
    grid = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    ys = np.linspace(0, cells, h, endpoint=False)
    xs = np.linspace(0, cells, w, endpoint=False)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def rasterize(shape: str, cy: float, cx: float, r: float, h: int, w: int) -> np.ndarray:
    """Boolean mask of a shape centred at pixel-centre coordinates (cy, cx)."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    if shape == "disk":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "triangle":
        # apex up, base at dy = r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def _bounce(pos: float, vel: float, r: float, limit: float) -> tuple[float, float]:
    pos += vel
    if pos - r < 0:
        pos, vel = 2 * r - pos, -vel
    elif pos + r > limit:
        pos, vel = 2 * (limit - r) - pos, -vel
    return pos, vel


def generate(config: GeneratorConfig) -> VideoSample:
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w, t_len = config.H, config.W, config.T
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    colors = rng.choice(config.palette_size, size=count, replace=count > config.palette_size)
    objects = []
    for _ in range(count):
        r = float(rng.uniform(config.min_size, config.max_size))
        speed = float(rng.uniform(config.min_speed, config.max_speed))
        angle = float(rng.uniform(0, 2 * np.pi))
        objects.append(
            {
                "shape": str(rng.choice(list(config.shapes))),
                "r": r,
                "y": float(rng.uniform(r, h - r)),
                "x": float(rng.uniform(r, w - r)),
                "vy": speed * np.sin(angle),
                "vx": speed * np.cos(angle),
            }
        )
    for obj, c in zip(objects, colors):
        obj["color"] = PALETTE[int(c)]

    background = np.full((h, w, 3), config.background_level)
    if config.texture_amplitude > 0:
        for ch in range(3):
            background[..., ch] += config.texture_amplitude * value_noise(rng, h, w)

    frames = np.empty((t_len, h, w, 3), dtype=np.float32)
    masks = np.zeros((t_len, h, w), dtype=np.uint16)
    for t in range(t_len):
        img = background.copy()
        mask = np.zeros((h, w), dtype=np.uint16)
        for k, obj in enumerate(objects, start=1):
            m = rasterize(obj["shape"], obj["y"], obj["x"], obj["r"], h, w)
            if not config.occlusion:
                m &= mask == 0
            img[m] = obj["color"]
            mask[m] = k
        frames[t] = np.clip(img, 0.0, 1.0)
        masks[t] = mask
        for obj in objects:
            obj["y"], obj["vy"] = _bounce(obj["y"], obj["vy"], obj["r"], h)
            obj["x"], obj["vx"] = _bounce(obj["x"], obj["vx"], obj["r"], w)

    meta = {"num_objects": count, "colors": colors.tolist(), "shapes": [o["shape"] for o in objects]}
    return VideoSample(frames=frames, gt_masks=masks, seed=config.seed, meta=meta)


def generate_many(config: GeneratorConfig, count: int) -> list[VideoSample]:
    """``count`` videos with seeds config.seed, config.seed + 1, ..."""
    out = []
    for k in range(count):
        cfg = GeneratorConfig(**{f.name: getattr(config, f.name) for f in fields(config)})
        cfg.seed = config.seed + k
        out.append(generate(cfg))
    return out


# ---------------------------------------------------------------------------
# dataset file
#
# header: 8-byte magic, u32 version, u32 sample count
# sample: u32 T, H, W, G, u64 seed, f32 frames [T,H,W,3], u16 masks [T,H,W]

_HEADER = struct.Struct("<8sII")
_SAMPLE = struct.Struct("<IIIIQ")


def write_dataset(samples, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(samples)))
        for s in samples:
            t, h, w = s.gt_masks.shape
            fh.write(_SAMPLE.pack(t, h, w, s.num_objects, s.seed))
            fh.write(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.gt_masks, dtype="<u2").tobytes())


def read_dataset(path) -> list[VideoSample]:
    buf = Path(path).read_bytes()

    def need(offset, size, what):
        if offset + size > len(buf):
            raise DatasetFormatError(f"truncated {what} at offset {offset} (need {size} bytes, have {len(buf) - offset})")

    need(0, _HEADER.size, "header")
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at offset 8")
    off = _HEADER.size
    samples = []
    for _ in range(count):
        need(off, _SAMPLE.size, "sample header")
        t, h, w, g, seed = _SAMPLE.unpack_from(buf, off)
        off += _SAMPLE.size
        n_frames = t * h * w * 3 * 4
        need(off, n_frames, "frame payload")
        frames = np.frombuffer(buf, dtype="<f4", count=t * h * w * 3, offset=off).reshape(t, h, w, 3).astype(np.float32)
        off += n_frames
        n_masks = t * h * w * 2
        need(off, n_masks, "mask payload")
        masks = np.frombuffer(buf, dtype="<u2", count=t * h * w, offset=off).reshape(t, h, w).astype(np.uint16)
        off += n_masks
        samples.append(VideoSample(frames=frames, gt_masks=masks, seed=seed, meta={"num_objects": g}))
    if off != len(buf):
        raise DatasetFormatError(f"trailing bytes at offset {off}")
    return samples

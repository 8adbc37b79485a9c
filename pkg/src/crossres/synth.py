"""Procedural tracking sequences, crop/resample pipeline and training targets.

Randomness comes from SplitMix64 only, so a sequence is a pure function of
``(seed, length, difficulty, H, W)``:

* scalar draws (shapes, colors, motion) use the sequential stream
  ``SplitMix64(seed)``, consumed in the order written in ``gen_sequence``;
* per-pixel noise uses the counter form ``mix64(key + i * GOLDEN)`` over the
  flattened (H, W, 3) raster, vectorized in uint64 arithmetic.

Floats are taken from the top 53 bits: ``(x >> 11) * 2**-53``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox
from .model import ConfigError

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
DIFFICULTIES = ("easy", "distractor", "clutter")
SHAPES = ("rectangle", "ellipse", "triangle")


def mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & _MASK
        return mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, n: int) -> int:
        """Integer in [0, n)."""
        return int(self.uniform() * n)

    def sign(self) -> float:
        return 1.0 if self.next_u64() >> 63 else -1.0


def noise_field(key: int, shape: tuple[int, ...]) -> np.ndarray:
    """Counter-based uniform [0, 1) field; element i is mix64(key + (i + 1) * GOLDEN)."""
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        z = np.uint64(key & _MASK) + (np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return ((z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53).reshape(shape)


def derive_seed(base: int, index: int) -> int:
    return mix64((base + (index + 1) * GOLDEN) & _MASK)


# -- sequence generation -------------------------------------------------------

@dataclass
class SyntheticSequence:
    seed: int
    frames: list[np.ndarray]
    boxes: list[BBox]
    difficulty: str
    num_objects: int = 1  # moving objects, target included

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class _Mover:
    shape: str
    color: np.ndarray
    stripe_color: np.ndarray
    stripe_angle: float
    stripe_period: float
    base_w: float   # pixels
    base_h: float
    cx: float       # pixels
    cy: float
    vx: float = 0.0
    vy: float = 0.0
    scale: float = 1.0

    @property
    def w(self) -> float:
        return self.base_w * self.scale

    @property
    def h(self) -> float:
        return self.base_h * self.scale


def _color(rng: SplitMix64) -> np.ndarray:
    return np.array([rng.uniform(0.05, 0.95) for _ in range(3)])


def _new_mover(rng: SplitMix64, shape: str, height: int, width: int) -> _Mover:
    side = rng.uniform(0.12, 0.2) * min(height, width)
    aspect = math.exp(rng.uniform(-0.35, 0.35))
    bw, bh = side * math.sqrt(aspect), side / math.sqrt(aspect)
    cx = rng.uniform(0.25, 0.75) * width
    cy = rng.uniform(0.25, 0.75) * height
    color = _color(rng)
    stripe = _color(rng)
    angle = rng.uniform(0.0, math.pi)
    period = rng.uniform(3.0, 7.0)
    return _Mover(shape, color, stripe, angle, period, bw, bh, cx, cy)


def _step(m: _Mover, rng: SplitMix64, height: int, width: int) -> None:
    speed = 0.12 * math.sqrt(m.base_w * m.base_h)
    m.vx = 0.8 * m.vx + 0.6 * speed * rng.uniform(-1.0, 1.0)
    m.vy = 0.8 * m.vy + 0.6 * speed * rng.uniform(-1.0, 1.0)
    m.scale = min(1.4, max(0.7, m.scale * (1.0 + rng.uniform(-0.05, 0.05))))
    m.cx += m.vx
    m.cy += m.vy
    # reflect so the whole box stays inside the frame
    for attr, vel, lim, half in (("cx", "vx", width, 0.5 * m.w), ("cy", "vy", height, 0.5 * m.h)):
        pos = getattr(m, attr)
        lo, hi = half + 1.0, lim - half - 1.0
        if pos < lo:
            setattr(m, attr, 2 * lo - pos)
            setattr(m, vel, abs(getattr(m, vel)))
        elif pos > hi:
            setattr(m, attr, 2 * hi - pos)
            setattr(m, vel, -abs(getattr(m, vel)))
        setattr(m, attr, min(max(getattr(m, attr), lo), hi))


def _shape_mask(shape: str, xs: np.ndarray, ys: np.ndarray, cx, cy, w, h) -> np.ndarray:
    u = (xs - cx) / (0.5 * w)
    v = (ys - cy) / (0.5 * h)
    if shape == "rectangle":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    # apex at top-center, base along the bottom edge
    return (v >= -1.0) & (v <= 1.0) & (np.abs(u) <= 0.5 * (v + 1.0))


def _paint(frame: np.ndarray, m: _Mover, xs: np.ndarray, ys: np.ndarray) -> None:
    mask = _shape_mask(m.shape, xs, ys, m.cx, m.cy, m.w, m.h)
    phase = ((xs - m.cx) * math.cos(m.stripe_angle) + (ys - m.cy) * math.sin(m.stripe_angle)) / m.stripe_period
    stripes = (np.floor(phase) % 2 == 0)
    fill = np.where(stripes[..., None], m.color, m.stripe_color)
    frame[mask] = fill[mask]


def _background(rng: SplitMix64, difficulty: str, height: int, width: int,
                xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    c0, c1 = _color(rng), _color(rng)
    angle = rng.uniform(0.0, 2 * math.pi)
    t = ((xs / width - 0.5) * math.cos(angle) + (ys / height - 0.5) * math.sin(angle)) + 0.5
    bg = c0 + (c1 - c0) * np.clip(t, 0.0, 1.0)[..., None]
    bg = 0.6 * bg + 0.2  # keep away from saturation
    if difficulty == "clutter":
        for _ in range(3):
            fx, fy = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)
            amp = _color(rng) * 0.15
            bg = bg + amp * np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * math.pi))[..., None]
        for _ in range(12):
            blob = _new_mover(rng, SHAPES[rng.randint(3)], height, width)
            blob.base_w *= 0.5
            blob.base_h *= 0.5
            blob.cx = rng.uniform(0.0, 1.0) * width
            blob.cy = rng.uniform(0.0, 1.0) * height
            _paint(bg, blob, xs, ys)
    return bg


def gen_sequence(seed: int, length: int, difficulty: str = "easy",
                 height: int = 128, width: int = 128) -> SyntheticSequence:
    """Render one sequence. Draw order: background, target, distractors, then per-frame motion."""
    if length < 2:
        raise ConfigError(f"sequence length must be >= 2, got {length}")
    if height < 64 or width < 64:
        raise ConfigError(f"frames must be at least 64x64, got {height}x{width}")
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    rng = SplitMix64(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    bg = _background(rng, difficulty, height, width, xs, ys)
    target = _new_mover(rng, SHAPES[rng.randint(3)], height, width)
    movers = []
    if difficulty == "distractor":
        for _ in range(2):
            movers.append(_new_mover(rng, target.shape, height, width))

    frames, boxes = [], []
    for t in range(length):
        if t > 0:
            for m in [target, *movers]:
                _step(m, rng, height, width)
        frame = bg.copy()
        for m in movers:
            _paint(frame, m, xs, ys)
        _paint(frame, target, xs, ys)
        frame += 0.04 * (noise_field(mix64(seed ^ (t + 1)), frame.shape) - 0.5)
        frames.append(np.clip(frame, 0.0, 1.0))
        boxes.append(BBox(target.cx / width, target.cy / height, target.w / width, target.h / height))
    return SyntheticSequence(seed, frames, boxes, difficulty, num_objects=1 + len(movers))


# -- cropping ------------------------------------------------------------------

@dataclass(frozen=True)
class CropMapping:
    """Square source window (pixels, continuous coords) inside a frame of size (frame_h, frame_w)."""

    x0: float
    y0: float
    side: float
    frame_h: int
    frame_w: int

    def crop_coords(self, box: BBox) -> BBox:
        """Frame-normalized box -> crop-normalized box."""
        return BBox((box.cx * self.frame_w - self.x0) / self.side,
                    (box.cy * self.frame_h - self.y0) / self.side,
                    box.w * self.frame_w / self.side,
                    box.h * self.frame_h / self.side)

    def frame_coords(self, box: BBox) -> BBox:
        """Crop-normalized box -> frame-normalized box."""
        return BBox((self.x0 + box.cx * self.side) / self.frame_w,
                    (self.y0 + box.cy * self.side) / self.frame_h,
                    box.w * self.side / self.frame_w,
                    box.h * self.side / self.frame_h)


def crop_window(box: BBox, context_factor: float, frame_h: int, frame_w: int) -> CropMapping:
    if context_factor <= 1:
        raise ConfigError(f"context_factor must exceed 1, got {context_factor}")
    if not (box.w > 0 and box.h > 0) or not all(map(math.isfinite, (box.cx, box.cy, box.w, box.h))):
        raise ConfigError(f"degenerate box {box}")
    side = context_factor * math.sqrt(box.w * box.h * frame_h * frame_w)
    cx, cy = box.cx * frame_w, box.cy * frame_h
    return CropMapping(cx - 0.5 * side, cy - 0.5 * side, side, frame_h, frame_w)


def render_crop(frame: np.ndarray, mapping: CropMapping, out_resolution: int) -> np.ndarray:
    """Bilinear resample of the mapping's window; out-of-frame samples use the channel mean."""
    h, w, _ = frame.shape
    step = mapping.side / out_resolution
    centers = (np.arange(out_resolution) + 0.5) * step - 0.5
    sy = mapping.y0 + centers
    sx = mapping.x0 + centers
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0)[:, None, None]
    fx = (sx - x0)[None, :, None]
    pad = frame.mean(axis=(0, 1))

    def sample(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        vals = frame[np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
        return np.where(valid[..., None], vals, pad)

    top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx
    bot = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx
    return top * (1.0 - fy) + bot * fy


def crop_region(frame: np.ndarray, box: BBox, context_factor: float,
                out_resolution: int) -> tuple[np.ndarray, CropMapping]:
    h, w, _ = frame.shape
    mapping = crop_window(box, context_factor, h, w)
    return render_crop(frame, mapping, out_resolution), mapping


@dataclass
class CropSample:
    """One training example; every image derives from ``crop_window`` / ``template_window``."""

    template_imgs: dict[int, np.ndarray]
    search_imgs: dict[int, np.ndarray]
    gt_box_in_crop: BBox
    crop_window: CropMapping
    template_window: CropMapping


TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 4.0


def make_crop_sample(template_frame: np.ndarray, template_box: BBox,
                     search_frame: np.ndarray, search_box: BBox, window_box: BBox,
                     template_res: tuple[int, ...], search_res: tuple[int, ...]) -> CropSample:
    """Crop template/search at several resolutions from shared windows."""
    h, w, _ = search_frame.shape
    t_map = crop_window(template_box, TEMPLATE_CONTEXT, *template_frame.shape[:2])
    s_map = crop_window(window_box, SEARCH_CONTEXT, h, w)
    gt = s_map.crop_coords(search_box).clipped()
    return CropSample(
        {r: render_crop(template_frame, t_map, r) for r in template_res},
        {r: render_crop(search_frame, s_map, r) for r in search_res},
        gt, s_map, t_map)


# -- targets ---------------------------------------------------------------------

@dataclass(frozen=True)
class RegTarget:
    cell: tuple[int, int]          # (row, col)
    offset: tuple[float, float]    # (x, y) fraction within the cell
    size: tuple[float, float]      # (w, h) crop fractions


def make_targets(box: BBox, grid: tuple[int, int]) -> tuple[np.ndarray, RegTarget]:
    """Gaussian center heatmap (peak exactly 1) plus regression target at the peak cell."""
    hs, ws = grid
    gx, gy = box.cx * ws, box.cy * hs
    j = min(max(int(math.floor(gx)), 0), ws - 1)
    i = min(max(int(math.floor(gy)), 0), hs - 1)
    diag = math.hypot(box.w * ws, box.h * hs)
    sigma = max(1.0, diag / 6.0)
    rows = np.arange(hs)[:, None] - i
    cols = np.arange(ws)[None, :] - j
    heat = np.exp(-(rows * rows + cols * cols) / (2.0 * sigma * sigma))
    return heat, RegTarget((i, j), (gx - j, gy - i), (box.w, box.h))


# -- on-disk format --------------------------------------------------------------

def write_sequence(seq: SyntheticSequence, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = (f"seed={seq.seed}\nheight={seq.height}\nwidth={seq.width}\n"
              f"length={len(seq)}\ndifficulty={seq.difficulty}\nnum_objects={seq.num_objects}\n")
    (out / "header.txt").write_text(header)
    for t, frame in enumerate(seq.frames):
        (out / f"frame_{t:04d}.f64").write_bytes(np.ascontiguousarray(frame, dtype="<f8").tobytes())
    lines = ["frame,cx,cy,w,h"]
    lines += [f"{t},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}" for t, b in enumerate(seq.boxes)]
    (out / "boxes.csv").write_text("\n".join(lines) + "\n")
    return out


def read_sequence(seq_dir: str | Path, mmap: bool = True) -> SyntheticSequence:
    d = Path(seq_dir)
    try:
        head = dict(line.split("=", 1) for line in (d / "header.txt").read_text().split("\n") if line)
        h, w, n = int(head["height"]), int(head["width"]), int(head["length"])
        boxes = []
        for line in (d / "boxes.csv").read_text().strip().split("\n")[1:]:
            _, cx, cy, bw, bh = line.split(",")
            boxes.append(BBox(float(cx), float(cy), float(bw), float(bh)))
        frames = []
        for t in range(n):
            path = d / f"frame_{t:04d}.f64"
            if mmap:
                frames.append(np.memmap(path, dtype="<f8", mode="r", shape=(h, w, 3)))
            else:
                frames.append(np.fromfile(path, dtype="<f8").reshape(h, w, 3))
    except (OSError, KeyError, ValueError) as exc:
        raise OSError(f"cannot read sequence at {d}: {exc}") from exc
    if len(boxes) != n:
        raise OSError(f"{d}: {len(boxes)} boxes for {n} frames")
    return SyntheticSequence(int(head["seed"]), frames, boxes, head["difficulty"],
                             int(head.get("num_objects", 1)))


def write_dataset(out_dir: str | Path, base_seed: int, num_sequences: int, length: int,
                  difficulty: str = "mixed", height: int = 128, width: int = 128) -> list[Path]:
    """Write ``num_sequences`` sequences to ``out_dir/seq_XXXX``; 'mixed' cycles difficulties."""
    paths = []
    for i in range(num_sequences):
        diff = DIFFICULTIES[i % len(DIFFICULTIES)] if difficulty == "mixed" else difficulty
        seq = gen_sequence(derive_seed(base_seed, i), length, diff, height, width)
        paths.append(write_sequence(seq, Path(out_dir) / f"seq_{i:04d}"))
    return paths


def read_dataset(data_dir: str | Path, mmap: bool = True) -> list[SyntheticSequence]:
    d = Path(data_dir)
    dirs = sorted(p for p in d.glob("seq_*") if p.is_dir())
    if not dirs:
        raise OSError(f"no sequences under {d}")
    return [read_sequence(p, mmap=mmap) for p in dirs]

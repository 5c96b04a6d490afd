"""Semantic layouts, images, noise vectors, the procedural toyfacades
dataset, augmentation, and netpbm file I/O.

Layouts are per-pixel class-index maps; images are H x W x 3 float arrays
in [0,1]. The synthetic world renders each layout as per-class base colors
modulated by a per-sample illumination factor and a fixed horizontal
shading gradient, so one layout family genuinely maps to many images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import TRAIN_DTYPE, Tensor, tensor

DEFAULT_CLASS_NAMES = ("wall", "window", "door", "roof")

# base colors chosen bright (headroom for multiplicative light fields
# without clipping) and pairwise angularly well separated so the
# palette-angle segmenter stays well-posed under illumination changes
DEFAULT_PALETTE = (
    (0.93, 0.90, 0.86),   # wall: pale plaster
    (0.29, 0.48, 0.95),   # window: glass blue
    (0.95, 0.36, 0.17),   # door: red-orange
    (0.31, 0.86, 0.40),   # roof: green slate
)


class DataError(ValueError):
    pass


@dataclass
class SemanticLayout:
    """H x W grid of class indices over a class set of size ``classes``."""

    pixels: np.ndarray          # (H, W) uint8
    classes: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2:
            raise DataError(f"layout pixels must be 2-D, got shape {self.pixels.shape}")
        if self.classes < 1:
            raise DataError("layout needs at least one class")
        if self.pixels.size and int(self.pixels.max()) >= self.classes:
            raise DataError(
                f"layout contains class index {int(self.pixels.max())} >= classes={self.classes}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def present_classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.pixels))


@dataclass
class ImageRGB:
    """H x W x 3 intensities in [0,1]."""

    values: np.ndarray          # (H, W, 3) float32

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise DataError(f"image must be (H,W,3), got {self.values.shape}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise DataError("image intensities must lie in [0,1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class NoiseVector:
    """|C| entries in [-1,1]; entry c steers segment c."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64).reshape(-1)
        if self.entries.size and (np.abs(self.entries) > 1.0).any():
            raise DataError("noise entries must lie in [-1,1]")

    @classmethod
    def zero(cls, classes: int) -> "NoiseVector":
        return cls(np.zeros(classes))

    @classmethod
    def sample(cls, classes: int, rng: np.random.Generator) -> "NoiseVector":
        return cls(rng.uniform(-1.0, 1.0, classes))

    def __len__(self) -> int:
        return self.entries.size


@dataclass
class Dataset:
    pairs: list[tuple[SemanticLayout, ImageRGB]]
    class_count: int
    split: str = "train"

    def __post_init__(self):
        if not self.pairs:
            raise DataError("dataset must contain at least one pair")
        h, w = self.pairs[0][0].height, self.pairs[0][0].width
        for layout, image in self.pairs:
            if (layout.height, layout.width) != (h, w) or (image.height, image.width) != (h, w):
                raise DataError("all dataset pairs must share dimensions")
            if layout.classes != self.class_count:
                raise DataError("all dataset layouts must share class_count")

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# encodings

def one_hot_array(layout: SemanticLayout, dtype=TRAIN_DTYPE) -> np.ndarray:
    """(|C|, H, W) indicator array; channel c marks pixels of class c."""
    chans = np.arange(layout.classes, dtype=layout.pixels.dtype)
    return (layout.pixels[None, :, :] == chans[:, None, None]).astype(dtype)


def one_hot_encode(layout: SemanticLayout, dtype=TRAIN_DTYPE) -> Tensor:
    return tensor(one_hot_array(layout, dtype), dtype=dtype)


def noise_channel_array(layout: SemanticLayout, noise: NoiseVector, dtype=TRAIN_DTYPE) -> np.ndarray:
    """(1, H, W) channel carrying n^c at every pixel of class c."""
    if len(noise) != layout.classes:
        raise DataError(f"noise has {len(noise)} entries, layout has {layout.classes} classes")
    return noise.entries.astype(dtype)[layout.pixels][None, :, :]


def build_noise_channel(layout: SemanticLayout, noise: NoiseVector, dtype=TRAIN_DTYPE) -> Tensor:
    return tensor(noise_channel_array(layout, noise, dtype), dtype=dtype)


def count_compositions(valid_values_per_class: list[int]) -> int:
    """Number of distinct noise settings: the product of per-class counts."""
    ks = list(valid_values_per_class)
    if not ks:
        raise DataError("count_compositions: empty class list")
    for k in ks:
        if k < 1:
            raise DataError(f"count_compositions: counts must be >= 1, got {k}")
    return math.prod(ks)


def tensor_to_image(t) -> ImageRGB:
    """(3,H,W) tensor in [0,1] -> ImageRGB."""
    arr = np.asarray(t.data if hasattr(t, "data") else t, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected a (3,H,W) tensor, got {arr.shape}")
    return ImageRGB(arr.transpose(1, 2, 0))


# ---------------------------------------------------------------------------
# synthetic world

@dataclass
class SyntheticWorldConfig:
    size: int = 32
    palette: tuple = DEFAULT_PALETTE
    class_names: tuple = DEFAULT_CLASS_NAMES
    window_rows: tuple[int, int] = (1, 3)
    window_cols: tuple[int, int] = (2, 4)
    roof_height: tuple[int, int] = (3, 7)
    illumination: tuple[float, float] = (0.65, 1.0)
    # per-class factors make the one-to-many variation span independent
    # per-segment brightness, the dimension the noise is meant to control
    per_class_illumination: bool = True
    # optional unrecorded per-pixel light field (multiplies every channel
    # equally, so it is angle-preserving); off by default
    texture_strength: float = 0.0
    shading_strength: float = 0.05
    min_palette_angle_deg: float = 10.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.illumination
        if not (0.0 < lo <= hi):
            raise DataError(f"illumination range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if len(self.palette) != len(self.class_names):
            raise DataError("palette and class_names must have equal length")
        ang = palette_min_angle_deg(self.palette)
        if ang < self.min_palette_angle_deg:
            raise DataError(
                f"palette base colors too close: min angle {ang:.1f} deg < {self.min_palette_angle_deg} deg")

    @property
    def class_count(self) -> int:
        return len(self.palette)


def palette_min_angle_deg(palette) -> float:
    vecs = np.asarray(palette, dtype=np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    if (norms == 0).any():
        raise DataError("palette colors must be non-zero")
    unit = vecs / norms[:, None]
    worst = 180.0
    for i in range(len(unit)):
        for j in range(i + 1, len(unit)):
            cosang = float(np.clip(unit[i] @ unit[j], -1.0, 1.0))
            worst = min(worst, math.degrees(math.acos(cosang)))
    return worst


def _build_facade_layout(cfg: SyntheticWorldConfig, rng: np.random.Generator) -> SemanticLayout:
    s = cfg.size
    px = np.zeros((s, s), dtype=np.uint8)  # wall everywhere

    roof_h = int(rng.integers(cfg.roof_height[0], cfg.roof_height[1] + 1))
    px[:roof_h, :] = 3

    rows = int(rng.integers(cfg.window_rows[0], cfg.window_rows[1] + 1))
    cols = int(rng.integers(cfg.window_cols[0], cfg.window_cols[1] + 1))
    body_top, body_bot = roof_h + 1, s - 2
    win_h = max(2, (body_bot - body_top) // (2 * rows))
    win_w = max(2, s // (2 * cols))
    for r in range(rows):
        y0 = body_top + (r * (body_bot - body_top)) // rows + 1
        for c in range(cols):
            x0 = (c * s) // cols + max(1, (s // cols - win_w) // 2)
            px[y0:y0 + win_h, x0:x0 + win_w] = 1

    door_w = max(3, s // 8)
    door_h = max(4, s // 6)
    door_x = int(rng.integers(1, s - door_w - 1))
    px[s - door_h:s, door_x:door_x + door_w] = 2

    return SemanticLayout(px, classes=cfg.class_count)


def render_layout(layout: SemanticLayout, cfg: SyntheticWorldConfig,
                  illumination=1.0, shading: bool = True) -> ImageRGB:
    """Palette lookup x illumination x horizontal shading, clamped to [0,1].

    ``illumination`` is a scalar or one factor per class.
    """
    palette = np.asarray(cfg.palette, dtype=np.float32)
    illum = np.asarray(illumination, dtype=np.float32)
    if illum.ndim == 0:
        lit = palette * illum
    else:
        if illum.shape != (cfg.class_count,):
            raise DataError(f"illumination needs 1 or {cfg.class_count} factors")
        lit = palette * illum[:, None]
    img = lit[layout.pixels.astype(np.int64)]
    if shading and cfg.shading_strength > 0:
        w = layout.width
        ramp = 1.0 - cfg.shading_strength * (np.arange(w, dtype=np.float32) / max(1, w - 1))
        img = img * ramp[None, :, None]
    return ImageRGB(np.clip(img, 0.0, 1.0))


def synth_generate(cfg: SyntheticWorldConfig, count: int, split: str = "train",
                   max_retries: int = 16) -> Dataset:
    """Generate ``count`` layout/image pairs; illumination varies per sample
    and is not recorded in the layout, so the mapping is one-to-many."""
    if count < 1:
        raise DataError("synth_generate: count must be >= 1")
    rng = np.random.default_rng(cfg.seed if split == "train" else cfg.seed + 0x5EED)
    pairs = []
    for _ in range(count):
        layout = None
        for _attempt in range(max_retries):
            candidate = _build_facade_layout(cfg, rng)
            counts = np.bincount(candidate.pixels.reshape(-1), minlength=cfg.class_count)
            if (counts > 0).all():
                layout = candidate
                break
        if layout is None:
            raise DataError(f"could not generate a layout with all {cfg.class_count} classes "
                            f"present after {max_retries} retries")
        lo, hi = cfg.illumination
        if cfg.per_class_illumination:
            illum = rng.uniform(lo, hi, size=cfg.class_count)
        else:
            illum = float(rng.uniform(lo, hi))
        image = render_layout(layout, cfg, illumination=illum)
        if cfg.texture_strength > 0:
            t = cfg.texture_strength
            field = rng.uniform(1.0 - t, 1.0 + t, size=(cfg.size, cfg.size)).astype(np.float32)
            image = ImageRGB(np.clip(image.values * field[:, :, None], 0.0, 1.0))
        pairs.append((layout, image))
    return Dataset(pairs, class_count=cfg.class_count, split=split)


# ---------------------------------------------------------------------------
# augmentation

def resize_layout_nearest(layout: SemanticLayout, height: int, width: int) -> SemanticLayout:
    ys = np.minimum((np.arange(height) + 0.5) * layout.height / height, layout.height - 1).astype(np.int64)
    xs = np.minimum((np.arange(width) + 0.5) * layout.width / width, layout.width - 1).astype(np.int64)
    return SemanticLayout(layout.pixels[np.ix_(ys, xs)], classes=layout.classes)


def resize_image_bilinear(image: ImageRGB, height: int, width: int) -> ImageRGB:
    src = image.values.astype(np.float64)
    sh, sw = image.height, image.width

    def axis_coords(n_dst, n_src):
        c = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
        c = np.clip(c, 0.0, n_src - 1)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, (c - lo)

    y0, y1, fy = axis_coords(height, sh)
    x0, x1, fx = axis_coords(width, sw)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return ImageRGB(np.clip(out, 0.0, 1.0).astype(np.float32))


def augment(pair: tuple[SemanticLayout, ImageRGB], target: int, jitter: int,
            flip_prob: float, rng: np.random.Generator) -> tuple[SemanticLayout, ImageRGB]:
    """Resize to target+jitter, take a random aligned crop of target size,
    flip horizontally with probability flip_prob. Layout and image always
    receive identical geometry."""
    layout, image = pair
    if target < 1:
        raise DataError("augment: target size must be >= 1")
    if jitter < 0:
        raise DataError("augment: jitter must be >= 0")
    big = target + jitter
    layout = resize_layout_nearest(layout, big, big)
    image = resize_image_bilinear(image, big, big)
    oy = int(rng.integers(0, jitter + 1))
    ox = int(rng.integers(0, jitter + 1))
    lp = layout.pixels[oy:oy + target, ox:ox + target]
    iv = image.values[oy:oy + target, ox:ox + target]
    if float(rng.uniform()) < flip_prob:
        lp = lp[:, ::-1]
        iv = iv[:, ::-1]
    return SemanticLayout(lp.copy(), classes=layout.classes), ImageRGB(iv.copy())


# ---------------------------------------------------------------------------
# netpbm I/O

def _parse_netpbm_header(data: bytes, magic: bytes, path: str):
    if data[:2] != magic:
        raise DataError(f"{path}: bad magic at byte 0, expected {magic.decode()} got {data[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header at byte {pos}")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise DataError(f"{path}: non-numeric header field at byte {start}") from None
    if pos >= len(data):
        raise DataError(f"{path}: missing payload separator at byte {pos}")
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def io_write_layout(path, layout: SemanticLayout) -> None:
    """Binary PGM (P5), one byte per pixel = class index."""
    header = f"P5\n{layout.width} {layout.height}\n255\n".encode()
    Path(path).write_bytes(header + layout.pixels.tobytes())


def io_read_layout(path, classes: int | None = None) -> SemanticLayout:
    data = Path(path).read_bytes()
    width, height, pos = _parse_netpbm_header(data, b"P5", str(path))
    need = width * height
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataError(f"{path}: payload truncated at byte {pos + len(payload)}, "
                        f"need {need} bytes")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    if classes is None:
        classes = int(px.max()) + 1 if px.size else 1
    return SemanticLayout(px.copy(), classes=classes)


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """[0,1] floats -> bytes with round-half-up."""
    return np.floor(values.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(image: ImageRGB) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    return header + quantize_u8(image.values).tobytes()


def io_write_image(path, image: ImageRGB) -> None:
    """Binary PPM (P6), byte = round-half-up(value * 255)."""
    Path(path).write_bytes(encode_ppm(image))


def io_read_image(path) -> ImageRGB:
    data = Path(path).read_bytes()
    width, height, pos = _parse_netpbm_header(data, b"P6", str(path))
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise DataError(f"{path}: payload truncated at byte {pos + len(payload)}, "
                        f"need {need} bytes")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImageRGB(raw.astype(np.float32) / 255.0)


def write_dataset(dataset: Dataset, out_dir, prefix: str = "") -> Path:
    """Write layouts/, images/, and a `<layout>\\t<image>` manifest; returns
    the manifest path."""
    out = Path(out_dir)
    (out / "layouts").mkdir(parents=True, exist_ok=True)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (layout, image) in enumerate(dataset.pairs):
        lp = out / "layouts" / f"{prefix}{dataset.split}_{i:04d}.pgm"
        ip = out / "images" / f"{prefix}{dataset.split}_{i:04d}.ppm"
        io_write_layout(lp, layout)
        io_write_image(ip, image)
        lines.append(f"{lp.relative_to(out)}\t{ip.relative_to(out)}")
    manifest = out / f"{dataset.split}.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_dataset(manifest_path, class_count: int, split: str | None = None) -> Dataset:
    manifest = Path(manifest_path)
    base = manifest.parent
    pairs = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{manifest}:{lineno}: manifest line needs exactly one tab")
        layout = io_read_layout(base / parts[0], classes=class_count)
        image = io_read_image(base / parts[1])
        pairs.append((layout, image))
    return Dataset(pairs, class_count=class_count, split=split or manifest.stem)

"""Images, manifests, the synthetic degradation corpus and the feature file.

Everything here is pure given its inputs. Images are float64 arrays in
[0, 1] with shape (height, width).
"""

from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .encoder import FeaturePyramid
from .errors import ConfigError, FormatError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
FEATURE_MAGIC = b"UNOQAFT1"
FEATURE_VERSION = 1


class QualityGrade(enum.IntEnum):
    """Quality grade, ordered by severity."""

    OUTSTANDING = 0
    GRADABLE = 1
    UNGRADABLE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> Optional["QualityGrade"]:
        text = text.strip().lower()
        if not text:
            return None
        try:
            return cls[text.upper()]
        except KeyError:
            raise FormatError(f"unknown quality label {text!r}") from None


@dataclass
class GrayImage:
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise FormatError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise FormatError("pixel values must be finite and lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centre alignment, edges clamped
    centres = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    centres = np.clip(centres, 0.0, n_in - 1)
    lo = np.floor(centres).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = centres - lo
    return lo, hi, frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a 2-D array using half-pixel centres."""
    arr = np.asarray(arr, dtype=np.float64)
    in_h, in_w = arr.shape
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    r0, r1, fr = _axis_weights(in_h, out_h)
    c0, c1, fc = _axis_weights(in_w, out_w)
    rows = arr[r0] * (1.0 - fr)[:, None] + arr[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc)[None, :] + rows[:, c1] * fc[None, :]


def load_image(path, size: int | tuple[int, int] = 320) -> GrayImage:
    """Read a PNG/PGM raster, convert to luma and resize to ``size``."""
    if isinstance(size, int):
        size = (size, size)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            data = np.asarray(im)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if data.size == 0 or min(data.shape[:2]) == 0:
        raise FormatError(f"image {path} has a zero dimension")
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        raise FormatError(f"image {path}: only 8-bit rasters are supported, got mode {mode}")
    data = data.astype(np.float64)
    if data.ndim == 3:
        data = data[..., :3] @ np.asarray(LUMA_WEIGHTS)
    pixels = resize_bilinear(data / 255.0, size[1], size[0])
    return GrayImage(np.clip(pixels, 0.0, 1.0))


def save_image(path, image: GrayImage) -> None:
    data = np.round(image.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


# --- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: Optional[QualityGrade] = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise FormatError(f"duplicate sample id {e.id!r} in manifest")
            seen.add(e.id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def labels(self) -> dict[str, Optional[QualityGrade]]:
        return {e.id: e.label for e in self.entries}

    def filter(self, grades) -> "Manifest":
        grades = set(grades)
        return Manifest([e for e in self.entries if e.label in grades])

    def subset(self, ids) -> "Manifest":
        keep = set(ids)
        return Manifest([e for e in self.entries if e.id in keep])


def read_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["id", "path", "label"]:
            raise FormatError(f"{path}: manifest header must be id,path,label, got {reader.fieldnames}")
        entries = []
        for row in reader:
            p = row["path"]
            if p and not Path(p).is_absolute():
                p = str(path.parent / p)
            entries.append(ManifestEntry(row["id"], p, QualityGrade.parse(row["label"] or "")))
    return Manifest(entries)


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "path", "label"])
        for e in manifest:
            w.writerow([e.id, e.path, e.label.label if e.label is not None else ""])


# --- synthetic corpus ------------------------------------------------------

@dataclass(frozen=True)
class DegradationRange:
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    occlusion_bands: tuple[int, int] = (0, 0)
    contrast_scale: tuple[float, float] = (1.0, 1.0)
    illumination: tuple[float, float] = (0.0, 0.0)
    speckle: tuple[float, float] = (0.0, 0.0)  # std of spatially correlated noise


@dataclass(frozen=True)
class SynthCorpusSpec:
    count_per_grade: int = 100
    seed: int = 0
    size: int = 320
    # gradable: strong but one-sided shading, otherwise near-clean
    gradable: DegradationRange = DegradationRange(
        blur_sigma=(0.4, 0.9), occlusion_bands=(0, 0),
        contrast_scale=(0.85, 1.0), illumination=(0.5, 0.85))
    # ungradable: diffuse loss of signal (blur, contrast, speckle) plus occlusions
    ungradable: DegradationRange = DegradationRange(
        blur_sigma=(1.0, 3.5), occlusion_bands=(0, 3),
        contrast_scale=(0.4, 0.9), illumination=(0.0, 0.3), speckle=(0.06, 0.15))
    noise_sigma: float = 0.03
    grades: tuple[QualityGrade, ...] = tuple(QualityGrade)

    def validate(self) -> None:
        if self.count_per_grade <= 0:
            raise ConfigError("synthetic corpus needs count_per_grade > 0")
        if self.size < 16:
            raise ConfigError("synthetic images must be at least 16 pixels wide")
        g, u = self.gradable, self.ungradable
        for name, rng in (("gradable", g), ("ungradable", u)):
            for lo, hi in (rng.blur_sigma, rng.occlusion_bands, rng.contrast_scale,
                           rng.illumination, rng.speckle):
                if lo > hi:
                    raise ConfigError(f"{name}: empty parameter range ({lo}, {hi})")
        if not (g.blur_sigma[1] < u.blur_sigma[1]
                and g.occlusion_bands[1] < u.occlusion_bands[1]
                and g.contrast_scale[0] > u.contrast_scale[0]):
            raise ConfigError("gradable degradations must be strictly milder than ungradable ones")


def _vessel_layer(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bright curvilinear strokes on a zero background, values in [0, 1]."""
    scale = size / 320.0
    layer = np.zeros((size, size))
    for width in (0.7, 1.1, 1.8):
        acc = np.zeros((size, size))
        n_strokes = rng.integers(7, 12)
        for _ in range(n_strokes):
            n = int(rng.integers(300, 700) * scale) + 2
            step = 0.75
            angle = rng.uniform(0, 2 * np.pi) + np.cumsum(rng.normal(0.0, 0.06, n))
            x = rng.uniform(0, size) + np.cumsum(step * np.cos(angle))
            y = rng.uniform(0, size) + np.cumsum(step * np.sin(angle))
            inside = (x >= 0) & (x < size - 1) & (y >= 0) & (y < size - 1)
            x, y = x[inside], y[inside]
            x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
            fx, fy = x - x0, y - y0
            np.add.at(acc, (y0, x0), (1 - fx) * (1 - fy))
            np.add.at(acc, (y0, x0 + 1), fx * (1 - fy))
            np.add.at(acc, (y0 + 1, x0), (1 - fx) * fy)
            np.add.at(acc, (y0 + 1, x0 + 1), fx * fy)
        prof = ndimage.gaussian_filter(acc, width * scale, mode="constant")
        layer = np.maximum(layer, 1.0 - np.exp(-prof * 6.0 * width * scale))
    return layer


def _outstanding_base(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    background = 0.08 + 0.02 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + rng.uniform()))
    vessels = _vessel_layer(rng, size)
    # avascular zone around the centre
    r = np.hypot(yy - 0.5 + rng.normal(0, 0.02), xx - 0.5 + rng.normal(0, 0.02))
    r0 = rng.uniform(0.08, 0.12)
    vessels *= 1.0 - np.exp(-((r / r0) ** 4))
    intensity = rng.uniform(0.75, 0.9)
    return background + (intensity - background) * vessels


def _degrade(base: np.ndarray, rng: np.random.Generator, spec: DegradationRange) -> np.ndarray:
    size = base.shape[0]
    img = base
    sigma = rng.uniform(*spec.blur_sigma) * size / 320.0
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma, mode="reflect")
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = (xx * np.cos(theta) + yy * np.sin(theta)) / np.sqrt(0.5) + 0.5  # 0..1 across the frame
    amp = rng.uniform(*spec.illumination)
    # falloff concentrated on one side of the frame
    img = img * (1.0 - amp * np.clip(ramp, 0.0, 1.0) ** 2)
    c = rng.uniform(*spec.contrast_scale)
    mean = img.mean()
    img = mean + c * (img - mean)
    n_bands = int(rng.integers(spec.occlusion_bands[0], spec.occlusion_bands[1] + 1))
    for _ in range(n_bands):
        h = int(rng.uniform(0.04, 0.12) * size)
        top = int(rng.integers(0, size - h))
        img[top:top + h] = rng.uniform(0.0, 0.04)
    amp = rng.uniform(*spec.speckle)
    if amp > 0:
        # low-signal decorrelation speckle: grainy at cell scale, smooth at pixel scale
        field_ = ndimage.gaussian_filter(rng.standard_normal(img.shape), 2.0 * size / 320.0, mode="wrap")
        img = img + amp * field_ / field_.std()
    return img


def synth_image(grade: QualityGrade, rng: np.random.Generator, spec: SynthCorpusSpec) -> GrayImage:
    img = _outstanding_base(rng, spec.size)
    if grade is QualityGrade.GRADABLE:
        img = _degrade(img, rng, spec.gradable)
    elif grade is QualityGrade.UNGRADABLE:
        img = _degrade(img, rng, spec.ungradable)
    img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return GrayImage(np.clip(img, 0.0, 1.0))


def generate_synthetic_corpus(spec: SynthCorpusSpec, prefix: str = "s",
                              stream: int = 0) -> tuple[list[GrayImage], Manifest]:
    """Build ``count_per_grade`` images for each grade in ``spec.grades``.

    Every image gets its own generator seeded from (seed, stream, grade,
    index), so the corpus is reproducible and any subset can be regenerated
    alone. Use distinct ``stream`` values for disjoint splits.
    """
    spec.validate()
    images, entries = [], []
    for grade in spec.grades:
        for i in range(spec.count_per_grade):
            rng = np.random.default_rng([spec.seed, stream, int(grade), i])
            images.append(synth_image(grade, rng, spec))
            sid = f"{prefix}{grade.label[0]}{i:04d}"
            entries.append(ManifestEntry(sid, f"{sid}.png", grade))
    return images, Manifest(entries)


# --- feature file ----------------------------------------------------------

def write_features(path, pyramids: Sequence[FeaturePyramid], ids: Sequence[str]) -> None:
    """Write pyramids to the little-endian ``UNOQAFT1`` container."""
    if len(pyramids) != len(ids):
        raise ConfigError("need exactly one id per pyramid")
    if not pyramids:
        raise ConfigError("cannot write an empty feature file")
    shapes = pyramids[0].shapes
    for p in pyramids:
        if p.shapes != shapes:
            raise ConfigError(f"pyramid shapes differ: {p.shapes} vs {shapes}")
    parts = [FEATURE_MAGIC, struct.pack("<3I", FEATURE_VERSION, len(pyramids), len(shapes))]
    for shape in shapes:
        parts.append(struct.pack("<3I", *shape))
    for i, p in enumerate(pyramids):
        parts.append(struct.pack("<I", i))
        for s in p.scales:
            parts.append(np.ascontiguousarray(s, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", len(ids)))
    for sid in ids:
        raw = sid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated feature file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def read_features(path) -> tuple[list[FeaturePyramid], list[str]]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(8, "magic")
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC.decode()!r}", 0)
    version = r.u32("version")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}, expected {FEATURE_VERSION}", 8)
    n_samples = r.u32("n_samples")
    k = r.u32("K")
    shapes = [tuple(r.u32(f"shape of scale {j}") for _ in range(3)) for j in range(k)]
    index, raw_scales = [], []
    for i in range(n_samples):
        index.append(r.u32(f"id index of sample {i}"))
        scales = []
        for j, (h, w, d) in enumerate(shapes):
            blob = r.take(4 * h * w * d, f"sample {i} scale {j}")
            scales.append(np.frombuffer(blob, dtype="<f4").reshape(h, w, d).copy())
        raw_scales.append(scales)
    n_ids = r.u32("id table count")
    table = []
    for i in range(n_ids):
        n = r.u32(f"id {i} length")
        start = r.pos
        try:
            table.append(r.take(n, f"id {i}").decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"id {i} is not valid UTF-8", start) from None
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after id table", r.pos)
    for i, ix in enumerate(index):
        if ix >= n_ids:
            raise FormatError(f"sample {i} references id {ix} but table has {n_ids}")
    return [FeaturePyramid(s) for s in raw_scales], [table[ix] for ix in index]

"""Dataset scanning, image codecs, synthetic defect data and heatmap panels.

Dataset layout (MVTec convention)::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/good/*.png
    <root>/<category>/test/<defect_type>/<stem>.png
    <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png

Supported codecs are 8-bit PNG and binary PPM/PGM, decoded with Pillow.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DatasetError
from .ops import resize_matrix
from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
_EIGHT_BIT_MODES = ("L", "RGB", "RGBA", "LA", "P", "1")


@dataclass
class RawImage:
    """8-bit RGB pixels, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or min(p.shape[:2]) < 1:
            raise ValueError(f"RawImage needs (h, w, 3) pixels, got {p.shape}")
        self.pixels = p.astype(np.uint8, copy=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> Tensor:
        return Tensor((self.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)[None])

    @classmethod
    def from_float(cls, rgb: np.ndarray) -> "RawImage":
        """``rgb`` in [0, 1], shape (3, h, w) or (h, w, 3); values are clamped."""
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim == 3 and rgb.shape[0] == 3 and rgb.shape[2] != 3:
            rgb = rgb.transpose(1, 2, 0)
        return cls(np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))


@dataclass
class TestItem:
    path: str
    label: int
    mask_path: str | None
    defect_type: str

    __test__ = False


@dataclass
class DatasetIndex:
    root: str
    category: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def relpath(self, path: str) -> str:
        return Path(path).relative_to(self.root).as_posix()


# -------------------------------------------------------------------- files

def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_png(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write an (h, w, 3) RGB or (h, w) grayscale uint8 array as PNG, atomically."""
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def _open(path: str | os.PathLike) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, SyntaxError, ValueError) as e:
        raise DatasetError(f"cannot decode image {path}: {e}") from e
    if im.mode not in _EIGHT_BIT_MODES:
        raise DatasetError(f"{path}: unsupported pixel format {im.mode} (8-bit RGB or grayscale only)")
    return im


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (half-pixel centres) resize of (c, h, w) float64 to (c, size, size)."""
    h, w = arr.shape[1:]
    if (h, w) == (size, size):
        return arr
    return np.matmul(np.matmul(resize_matrix(h, size), arr), resize_matrix(w, size).T)


def read_rgb(path: str | os.PathLike) -> RawImage:
    im = _open(path)
    if im.mode in ("L", "LA", "1"):
        g = np.asarray(im.convert("L"))
        return RawImage(np.repeat(g[:, :, None], 3, axis=2))
    return RawImage(np.asarray(im.convert("RGB")))


def load_image(path: str | os.PathLike, target_size: int) -> Tensor:
    """(1, 3, target, target) tensor in [0, 1]; grayscale is replicated to 3 channels."""
    raw = read_rgb(path).pixels.astype(np.float64) / 255.0
    out = np.clip(_resize(raw.transpose(2, 0, 1), target_size), 0.0, 1.0)
    return Tensor(out[None].astype(np.float32))


def load_mask(path: str | os.PathLike, target_size: int) -> np.ndarray:
    """(target, target) array of exactly {0, 1}; any nonzero byte counts as anomalous."""
    im = _open(path)
    m = (np.asarray(im.convert("L")) > 0).astype(np.uint8)
    if m.shape == (target_size, target_size):
        return m
    return (_resize(m[None].astype(np.float64), target_size)[0] >= 0.5).astype(np.uint8)


def _images_in(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.startswith("."))


def _find_mask(gt_dir: Path, stem: str) -> Path | None:
    if not gt_dir.is_dir():
        return None
    hits = sorted(p for p in gt_dir.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and p.stem.startswith(stem) and "_mask" in p.stem[len(stem):])
    return hits[0] if hits else None


def scan_dataset(root: str | os.PathLike, category: str) -> DatasetIndex:
    root = Path(root)
    base = root / category
    if not base.is_dir():
        raise DatasetError(f"category directory {base} does not exist")
    train = [str(p) for p in _images_in(base / "train" / "good")]
    if not train:
        raise DatasetError(f"no training images under {base / 'train' / 'good'}")
    test = []
    test_dir = base / "test"
    types = sorted(d.name for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []
    for t in types:
        for img in _images_in(test_dir / t):
            if t == "good":
                test.append(TestItem(str(img), 0, None, t))
                continue
            mask = _find_mask(base / "ground_truth" / t, img.stem)
            if mask is None:
                raise DatasetError(f"anomalous image {img} has no mask in {base / 'ground_truth' / t}")
            test.append(TestItem(str(img), 1, str(mask), t))
    return DatasetIndex(str(root), category, train, test)


# --------------------------------------------------------- synthetic dataset

@dataclass(frozen=True)
class SyntheticSpec:
    category: str = "synth"
    n_train: int = 32
    n_test_good: int = 8
    n_test_defect: int = 16
    size: int = 64
    seed: int = 7


def _part(rng: np.random.Generator, size: int):
    """Textured capsule-shaped part with an off-centre hole; returns (rgb (h, w, 3), footprint)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.38, 0.62, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    half_len = 0.26 * size * rng.uniform(0.92, 1.08)
    half_wid = 0.13 * size * rng.uniform(0.92, 1.08)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    dist = np.hypot(np.maximum(np.abs(u) - half_len, 0.0), v)
    hole = np.hypot(u - 0.75 * half_len, v) < 0.45 * half_wid
    footprint = (dist <= half_wid) & ~hole

    bg = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3.0, mode="reflect")
    bg = 0.10 + bg * (0.01 / max(bg.std(), 1e-12))
    tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5, mode="reflect")
    tex *= 0.025 / max(tex.std(), 1e-12)
    shade = 0.06 * u / half_len
    base = np.array([0.62, 0.58, 0.50])
    part = base[None, None, :] + (tex + shade)[:, :, None]
    rgb = np.where(footprint[:, :, None], part, bg[:, :, None])
    return rgb, footprint


def _defects(rng: np.random.Generator, footprint: np.ndarray, count: int):
    size = footprint.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    inner = ndimage.binary_erosion(footprint, iterations=3)
    candidates = np.argwhere(inner if inner.any() else footprint)
    regions = []
    for _ in range(count):
        cy, cx = candidates[rng.integers(len(candidates))] + 0.5
        if rng.random() < 0.5:
            ry, rx = rng.uniform(3.0, 5.0, size=2)
            ang = rng.uniform(0, np.pi)
            du = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            dv = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            region = (du / rx) ** 2 + (dv / ry) ** 2 <= 1.0
        else:
            length = rng.uniform(10.0, 16.0)
            ang = rng.uniform(0, np.pi)
            du = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
            dv = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
            region = (np.abs(du) <= length / 2) & (np.abs(dv) <= 1.0)
        region &= footprint
        if not region.any():
            region = np.zeros_like(footprint)
            region[int(cy), int(cx)] = True
        sign = 1.0 if rng.random() < 0.5 else -1.0
        shift = sign * rng.uniform(0.2, 0.3) * np.array([1.0, rng.uniform(0.7, 1.0), rng.uniform(0.4, 1.0)])
        regions.append((region, shift))
    return regions


def make_synthetic_dataset(out_root: str | os.PathLike, spec: SyntheticSpec = SyntheticSpec()) -> Path:
    """Write a seeded synthetic dataset in the standard layout and return the category path."""
    out_root = Path(out_root)
    base = out_root / spec.category
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {base}: {e}") from e
    rng = np.random.Generator(np.random.Philox(spec.seed))
    to_u8 = lambda a: np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)  # noqa: E731

    for i in range(spec.n_train):
        rgb, _ = _part(rng, spec.size)
        save_png(base / "train" / "good" / f"{i:03d}.png", to_u8(rgb))
    for i in range(spec.n_test_good):
        rgb, _ = _part(rng, spec.size)
        save_png(base / "test" / "good" / f"{i:03d}.png", to_u8(rgb))
    for i in range(spec.n_test_defect):
        rgb, footprint = _part(rng, spec.size)
        mask = np.zeros_like(footprint)
        for region, shift in _defects(rng, footprint, int(rng.integers(1, 4))):
            rgb = np.where(region[:, :, None], rgb + shift[None, None, :], rgb)
            mask |= region
        if not mask.any() or (mask & ~footprint).any():
            raise DatasetError(f"generated defect mask {i} is empty or leaves the part")
        save_png(base / "test" / "defect" / f"{i:03d}.png", to_u8(rgb))
        save_png(base / "ground_truth" / "defect" / f"{i:03d}_mask.png", mask.astype(np.uint8) * 255)
    meta = {"category": spec.category, "n_train": spec.n_train, "n_test_good": spec.n_test_good,
            "n_test_defect": spec.n_test_defect, "size": spec.size, "seed": spec.seed}
    atomic_write(base / "synthetic.json", (json.dumps(meta, sort_keys=True) + "\n").encode())
    return base


# ------------------------------------------------------------------ heatmaps

# blue -> cyan -> green -> yellow -> red, evenly spaced on [0, 1]
COLORMAP_STOPS = np.array([[0, 0, 255], [0, 255, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


def colorize(values: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB along the five-stop colormap."""
    v = np.clip(values, 0.0, 1.0) * (len(COLORMAP_STOPS) - 1)
    i0 = np.minimum(np.floor(v).astype(int), len(COLORMAP_STOPS) - 2)
    t = (v - i0)[..., None]
    rgb = COLORMAP_STOPS[i0] * (1.0 - t) + COLORMAP_STOPS[i0 + 1] * t
    return np.round(rgb).astype(np.uint8)


@dataclass
class HeatmapPanels:
    heatmap: RawImage
    overlay: RawImage
    region: RawImage
    threshold: float


def render_heatmap(amap, underlay: RawImage, threshold: float | None = None, alpha: float = 0.5) -> HeatmapPanels:
    """Per-image min-max heatmap, 50% overlay on ``underlay`` and a binarized region panel.

    A constant map normalizes to all zeros (lowest colour). The default
    threshold is mean + 3 * std of the raw map; it is for display only.
    """
    m = np.asarray(getattr(amap, "pixels", amap), dtype=np.float64)
    if m.shape != (underlay.height, underlay.width):
        raise ValueError(f"map {m.shape} does not match underlay {(underlay.height, underlay.width)}")
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    heat = colorize(norm)
    overlay = np.round(alpha * heat.astype(np.float64) + (1.0 - alpha) * underlay.pixels.astype(np.float64))
    if threshold is None:
        threshold = float(m.mean() + 3.0 * m.std())
    region = np.where((m > threshold)[:, :, None], np.uint8(255), np.uint8(0)).repeat(3, axis=2)
    return HeatmapPanels(RawImage(heat), RawImage(overlay.astype(np.uint8)), RawImage(region), threshold)

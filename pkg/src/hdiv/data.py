"""Image IO, synthetic degradation, bicubic guides, patch sampling and augmentation.

Images are float arrays shaped (C, H, W) with values in [0, 1].
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".pgm")
CUBIC_A = -0.5


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def load_image(path: str | Path, dtype=np.float32) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK", "YCbCr") else "L")
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise DatasetError(f"{path}: only 8-bit images are supported, got {arr.dtype}")
    arr = arr.astype(dtype) / dtype(255)
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Write a (C, H, W) or (H, W) float image as 8-bit PNG, clamping to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"image directory not found: {root}")
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def center_crop(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Crop (C, H, W) to the largest centred window with sides divisible by ``multiple``.

    Returns the crop and (top, left, height, width).
    """
    _, h, w = img.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise DatasetError(f"image {h}x{w} is smaller than {multiple}x{multiple}")
    top, left = (h - nh) // 2, (w - nw) // 2
    return np.ascontiguousarray(img[:, top:top + nh, left:left + nw]), (top, left, nh, nw)


# ---------------------------------------------------------------------------
# degradation
# ---------------------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def add_awgn(x: np.ndarray, sigma: float, seed) -> np.ndarray:
    """x + N(0, sigma^2) per element, sigma in [0, 1] units. Not clamped."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return x.copy()
    noise = _rng(seed).standard_normal(x.shape) * sigma
    return (x + noise).astype(x.dtype)


def add_poisson_gaussian(x: np.ndarray, peak: float, sigma: float, seed) -> np.ndarray:
    """Poisson(x * peak) / peak + N(0, sigma^2)."""
    rng = _rng(seed)
    shot = rng.poisson(np.clip(x, 0, None) * peak) / peak
    return (shot + rng.standard_normal(x.shape) * sigma).astype(x.dtype)


# ---------------------------------------------------------------------------
# bicubic downsampling
# ---------------------------------------------------------------------------

def cubic_kernel(t, a: float = CUBIC_A):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _reflect(i: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric extension: -1 -> 0, n -> n-1
    period = 2 * n
    i = np.mod(i, period)
    return np.where(i < n, i, period - 1 - i)


@functools.lru_cache(maxsize=64)
def resample_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in // factor, n_in) matrix of anti-aliased cubic weights."""
    n_out = n_in // factor
    support = 2 * factor
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * factor - 0.5
        taps = np.arange(int(np.floor(center - support)) + 1, int(np.ceil(center + support)))
        weights = cubic_kernel((taps - center) / factor)
        weights /= weights.sum()
        np.add.at(m[o], _reflect(taps, n_in), weights)
    m.setflags(write=False)
    return m


def bicubic_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Separable cubic (a = -0.5) downscale of (..., H, W) by an integer power of two."""
    if factor not in (1, 2, 4, 8, 16):
        raise ValueError(f"factor must be a power of two up to 16, got {factor}")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    if factor == 1:
        return x.copy()
    ry = resample_matrix(h, factor)
    rx = resample_matrix(w, factor)
    out = np.matmul(np.matmul(ry, x.astype(np.float64)), rx.T)
    return out.astype(x.dtype)


def make_guides(clean: np.ndarray, levels: int) -> list[np.ndarray]:
    return [bicubic_downsample(clean, 2 ** (l + 1)) for l in range(levels)]


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------

def sample_patch(pair: tuple[np.ndarray, np.ndarray], size: int, rng: np.random.Generator):
    clean, noisy = pair
    _, h, w = clean.shape
    if noisy.shape != clean.shape:
        raise DatasetError(f"pair shapes differ: {clean.shape} vs {noisy.shape}")
    if size > h or size > w:
        raise DatasetError(f"patch {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    win = (slice(None), slice(top, top + size), slice(left, left + size))
    return clean[win].copy(), noisy[win].copy()


def apply_transform(img: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    if hflip:
        img = img[:, :, ::-1]
    if vflip:
        img = img[:, ::-1, :]
    if rot % 4:
        img = np.rot90(img, k=rot, axes=(1, 2))
    return np.ascontiguousarray(img)


def augment(clean: np.ndarray, noisy: np.ndarray, rng: np.random.Generator):
    """Same random flips and 90-degree rotation applied to both images."""
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    rot = int(rng.integers(0, 4))
    if rot % 2 and clean.shape[1] != clean.shape[2]:
        raise DatasetError(f"odd rotation of a non-square patch {clean.shape[1:]}")
    return apply_transform(clean, hflip, vflip, rot), apply_transform(noisy, hflip, vflip, rot)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Degradation:
    """On-the-fly synthetic noise; ``sigma`` in [0, 1] units."""
    sigma: float
    poisson_peak: float | None = None

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.poisson_peak:
            return add_poisson_gaussian(x, self.poisson_peak, self.sigma, rng)
        return add_awgn(x, self.sigma, rng)


@dataclass
class PairDataset:
    clean_paths: list[Path]
    noisy_paths: list[Path] | None = None
    degradation: Degradation | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.clean_paths:
            raise DatasetError("dataset is empty")
        if self.noisy_paths is None and self.degradation is None:
            raise DatasetError("need either noisy images or a degradation")
        if self.noisy_paths is not None and len(self.noisy_paths) != len(self.clean_paths):
            raise DatasetError("clean and noisy lists differ in length")

    @classmethod
    def from_root(cls, root: str | Path, degradation: Degradation | None = None) -> "PairDataset":
        """``<root>/clean/*`` paired by filename with ``<root>/noisy/*`` (or a manifest)."""
        root = Path(root)
        manifest = root / "manifest.tsv"
        if manifest.is_file() and degradation is None:
            return cls.from_manifest(manifest)
        clean_dir = root / "clean"
        clean = list_images(clean_dir)
        if not clean:
            raise DatasetError(f"no PNG/PGM images in {clean_dir}")
        if degradation is not None:
            return cls(clean, None, degradation)
        noisy_dir = root / "noisy"
        if not noisy_dir.is_dir():
            raise DatasetError(f"noisy image directory not found: {noisy_dir}")
        noisy_names = {p.name for p in list_images(noisy_dir)}
        missing = [p.name for p in clean if p.name not in noisy_names]
        extra = sorted(noisy_names - {p.name for p in clean})
        if missing or extra:
            raise DatasetError(f"unpaired files under {root}: missing noisy {missing[:5]}, "
                               f"no clean for {extra[:5]}")
        return cls(clean, [noisy_dir / p.name for p in clean])

    @classmethod
    def from_manifest(cls, path: str | Path) -> "PairDataset":
        path = Path(path)
        clean, noisy = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'clean<TAB>noisy'")
            clean.append((path.parent / parts[0]).resolve())
            noisy.append((path.parent / parts[1]).resolve())
        return cls(clean, noisy)

    def __len__(self) -> int:
        return len(self.clean_paths)

    def name(self, i: int) -> str:
        return self.clean_paths[i].name

    def clean(self, i: int, dtype=np.float32) -> np.ndarray:
        key = ("c", i, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = load_image(self.clean_paths[i], dtype)
        return self._cache[key]

    def noisy(self, i: int, rng: np.random.Generator | None = None, dtype=np.float32) -> np.ndarray:
        if self.noisy_paths is None:
            if rng is None:
                raise ValueError("on-the-fly degradation needs an rng")
            return self.degradation.apply(self.clean(i, dtype), rng)
        key = ("n", i, np.dtype(dtype).str)
        if key not in self._cache:
            img = load_image(self.noisy_paths[i], dtype)
            if img.shape != self.clean(i, dtype).shape:
                raise DatasetError(f"{self.noisy_paths[i]}: shape {img.shape} differs from clean "
                                   f"{self.clean(i, dtype).shape}")
            self._cache[key] = img
        return self._cache[key]

    def pair(self, i: int, rng: np.random.Generator | None = None, dtype=np.float32):
        return self.clean(i, dtype), self.noisy(i, rng, dtype)


def sample_batch(ds: PairDataset, batch: int, size: int, rng: np.random.Generator,
                 do_augment: bool = True, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``batch`` aligned (clean, noisy) patches into two N,C,H,W arrays."""
    cleans, noisies = [], []
    for _ in range(batch):
        i = int(rng.integers(0, len(ds)))
        if ds.noisy_paths is None:
            c, _ = sample_patch((ds.clean(i, dtype), ds.clean(i, dtype)), size, rng)
            n = ds.degradation.apply(c, rng)
        else:
            c, n = sample_patch(ds.pair(i, dtype=dtype), size, rng)
        if do_augment:
            c, n = augment(c, n, rng)
        cleans.append(c)
        noisies.append(n)
    return np.stack(cleans), np.stack(noisies)


# ---------------------------------------------------------------------------
# procedural clean images (desk-scale corpus)
# ---------------------------------------------------------------------------

def procedural_image(rng: np.random.Generator, size: int = 128, channels: int = 3) -> np.ndarray:
    """Piecewise-smooth synthetic picture: colour gradient, soft-edged shapes, faint stripes."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    corners = rng.uniform(0.1, 0.9, size=(4, channels))
    img = (corners[0][:, None, None] * (1 - yy) * (1 - xx) + corners[1][:, None, None] * (1 - yy) * xx
           + corners[2][:, None, None] * yy * (1 - xx) + corners[3][:, None, None] * yy * xx)
    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0, 1, size=channels)[:, None, None]
        cy, cx = rng.uniform(0, 1, 2)
        soft = rng.uniform(0.002, 0.01)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.05, 0.3, 2)
            d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 - 1
            d = d * min(ry, rx) / 2
        else:
            hy, hx = rng.uniform(0.05, 0.3, 2)
            d = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
        alpha = 1 / (1 + np.exp(np.clip(d / soft, -50, 50)))
        img = img * (1 - alpha) + color * alpha
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(4, 12)
        stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        img = img + rng.uniform(0.02, 0.06) * stripes
    return np.clip(img, 0, 1).astype(np.float32)


def write_procedural_corpus(root: str | Path, count: int, size: int, seed: int,
                            channels: int = 3) -> list[Path]:
    """Write ``count`` procedural clean images as PNG into ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        img = procedural_image(np.random.default_rng([seed, i]), size, channels)
        p = root / f"img_{i:04d}.png"
        save_image(p, img)
        paths.append(p)
    return paths


def synthesize_pairs(clean_root: str | Path, out_root: str | Path, sigma: float, seed: int) -> int:
    """Materialise ``<out>/clean`` and ``<out>/noisy`` from a folder of clean images."""
    sources = list_images(clean_root)
    if not sources:
        raise DatasetError(f"no PNG/PGM images in {clean_root}")
    out_root = Path(out_root)
    for i, src in enumerate(sources):
        img = load_image(src, np.float64)
        noisy = add_awgn(img, sigma, np.random.default_rng([seed, i]))
        name = src.with_suffix(".png").name
        save_image(out_root / "clean" / name, img)
        save_image(out_root / "noisy" / name, noisy)
    return len(sources)


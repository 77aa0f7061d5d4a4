"""Image decoding, folder datasets and the synthetic flexible-object generator."""

import logging
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import png

from hgfx.errors import DataError
from hgfx.models import DatasetSpec

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")
SYNTH_CLASSES = ("cloud", "smoke")


# --- Decoding / encoding ---


def _netpbm_header(blob: bytes) -> tuple[bytes, list[int], int]:
    """Magic, [width, height, maxval] and the offset of the raster."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM/PGM header")
        tokens.append(blob[start:pos])
    try:
        values = [int(t) for t in tokens[1:]]
    except ValueError:
        raise DataError("malformed PPM/PGM header") from None
    return tokens[0], values, pos + 1  # single whitespace before the raster


def decode_netpbm(blob: bytes) -> np.ndarray:
    magic, (width, height, maxval), offset = _netpbm_header(blob)
    channels = {b"P6": 3, b"P5": 1}.get(magic)
    if channels is None:
        raise DataError(f"unsupported netpbm type {magic!r}; expected P6 or P5")
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DataError(f"bad netpbm dimensions {width}x{height} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=offset) if len(blob) - offset >= count * dtype.itemsize else None
    if raster is None:
        raise DataError("netpbm raster is truncated")
    return raster.reshape(height, width, channels).astype(np.float64) / maxval


def decode_png(blob: bytes) -> np.ndarray:
    try:
        width, height, rows, info = png.Reader(bytes=blob).asDirect()
        raster = np.vstack([np.asarray(row, dtype=np.float64) for row in rows])
    except (png.Error, EOFError, ValueError) as exc:
        raise DataError(f"cannot decode PNG: {exc}") from exc
    planes = info["planes"]
    pixels = raster.reshape(height, width, planes) / (2 ** info["bitdepth"] - 1)
    if info["alpha"]:
        pixels = pixels[..., :-1]
    return pixels


def decode_image(blob: bytes) -> np.ndarray:
    """(H, W, C) floats in [0, 1] from PPM (P6), PGM (P5) or PNG bytes."""
    if blob[:2] in (b"P6", b"P5"):
        return decode_netpbm(blob)
    if blob[:8] == b"\x89PNG\r\n\x1a\n":
        return decode_png(blob)
    raise DataError("unrecognized image format; expected PPM P6, PGM P5 or PNG")


def read_image(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_image(blob)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _to_bytes(pixels: np.ndarray) -> bytes:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8).tobytes()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    if c != 3:
        raise DataError(f"PPM needs 3 channels, got {c}")
    return f"P6\n{w} {h}\n255\n".encode() + _to_bytes(pixels)


def encode_pgm(gray: np.ndarray) -> bytes:
    """Gray levels in [0, 1], shape (H, W)."""
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + _to_bytes(gray)


def write_file(path: Path, blob: bytes):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def conform_channels(pixels: np.ndarray, channels: int) -> np.ndarray:
    if pixels.shape[2] == channels:
        return pixels
    if channels == 3 and pixels.shape[2] == 1:
        return np.repeat(pixels, 3, axis=2)
    if channels == 1 and pixels.shape[2] in (2, 3):
        return pixels[..., :3].mean(axis=2, keepdims=True)
    if channels == 3 and pixels.shape[2] == 2:
        return np.repeat(pixels[..., :1], 3, axis=2)
    raise DataError(f"cannot convert {pixels.shape[2]}-channel image to {channels} channels")


# --- Datasets ---


@dataclass
class ImageDataset:
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,)
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            sel = order[start : start + batch_size]
            yield self.images[sel], self.labels[sel]

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.intp)
        return ImageDataset(self.images[indices], self.labels[indices], self.class_names)


def list_class_files(root: str | Path) -> tuple[list[str], list[list[Path]]]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    files = [sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) for d in class_dirs]
    return [d.name for d in class_dirs], files


def load_dataset(
    root: str | Path,
    image_size: int,
    channels: int,
    val_fraction: float = 1.0 / 3.0,
    seed: int = 7,
    threads: int = 1,
    dtype=np.float32,
) -> tuple[ImageDataset, ImageDataset, DatasetSpec]:
    """Folder-per-class dataset split per class with a seeded permutation."""
    class_names, files = list_class_files(root)
    if len(class_names) < 2:
        raise DataError(f"training needs at least 2 class directories under {root}, found {len(class_names)}")
    paths = [p for group in files for p in group]
    if not paths:
        raise DataError(f"no images found under {root}")
    labels = np.concatenate([np.full(len(group), i, dtype=np.intp) for i, group in enumerate(files)])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            decoded = list(pool.map(read_image, paths))
    else:
        decoded = [read_image(p) for p in paths]
    for path, pixels in zip(paths, decoded):
        if pixels.shape[:2] != (image_size, image_size):
            raise DataError(f"{path}: expected {image_size}x{image_size}, got {pixels.shape[1]}x{pixels.shape[0]}")
    images = np.stack([conform_channels(p, channels) for p in decoded]).astype(dtype)
    full = ImageDataset(images, labels, class_names)

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(len(class_names)):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(round(len(members) * val_fraction))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    spec = DatasetSpec(
        root=str(root),
        class_names=class_names,
        counts=[len(g) for g in files],
        val_fraction=val_fraction,
        seed=seed,
    )
    logger.info("loaded %d images in %d classes from %s", len(full), len(class_names), root)
    return full.subset(sorted(train_idx)), full.subset(sorted(val_idx)), spec


# --- Synthetic flexible objects ---


def _gaussian(yy, xx, cy, cx, sigma_long, sigma_short, angle):
    dy, dx = yy - cy, xx - cx
    cos, sin = np.cos(angle), np.sin(angle)
    along = dx * cos + dy * sin
    across = -dx * sin + dy * cos
    return np.exp(-0.5 * ((along / sigma_long) ** 2 + (across / sigma_short) ** 2))


def render_cloud(size: int, rng: np.random.Generator) -> np.ndarray:
    """Diffuse, roughly isotropic translucent blobs over a sky gradient."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    top = np.array([0.30, 0.50, 0.85]) + rng.uniform(-0.08, 0.08, 3)
    bottom = np.array([0.55, 0.70, 0.92]) + rng.uniform(-0.08, 0.08, 3)
    t = (yy / (size - 1))[..., None]
    img = top * (1 - t) + bottom * t
    for _ in range(rng.integers(3, 7)):
        sigma = rng.uniform(0.08, 0.2) * size
        blob = _gaussian(yy, xx, rng.uniform(0, size), rng.uniform(0, size),
                         sigma * rng.uniform(0.8, 1.25), sigma, rng.uniform(0, np.pi))
        alpha = (rng.uniform(0.4, 0.9) * blob)[..., None]
        white = np.full(3, rng.uniform(0.88, 1.0))
        img = img * (1 - alpha) + white * alpha
    return np.clip(img, 0.0, 1.0)


def render_smoke(size: int, rng: np.random.Generator) -> np.ndarray:
    """Anisotropic dark streaks drifting across a dull background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.ones((size, size, 3)) * (np.array([0.62, 0.58, 0.52]) + rng.uniform(-0.1, 0.1, 3))
    drift = rng.uniform(0, np.pi)
    for _ in range(rng.integers(2, 5)):
        streak = _gaussian(yy, xx, rng.uniform(0, size), rng.uniform(0, size),
                           rng.uniform(0.2, 0.45) * size, rng.uniform(0.03, 0.07) * size,
                           drift + rng.normal(0.0, 0.25))
        alpha = (rng.uniform(0.5, 0.95) * streak)[..., None]
        gray = np.full(3, rng.uniform(0.15, 0.35))
        img = img * (1 - alpha) + gray * alpha
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(out_dir: str | Path, n_per_class: int, size: int = 32, seed: int = 7) -> DatasetSpec:
    """Write ``n_per_class`` PPM images per synthetic class under ``out_dir``."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    renderers = {"cloud": render_cloud, "smoke": render_smoke}
    for name in SYNTH_CLASSES:
        class_dir = out_dir / name
        try:
            class_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create {class_dir}: {exc}") from exc
        for i in range(n_per_class):
            write_file(class_dir / f"{i:04d}.ppm", encode_ppm(renderers[name](size, rng)))
    logger.info("wrote %d synthetic images per class to %s", n_per_class, out_dir)
    return DatasetSpec(
        root=str(out_dir),
        class_names=list(SYNTH_CLASSES),
        counts=[n_per_class] * len(SYNTH_CLASSES),
        val_fraction=0.0,
        seed=seed,
    )

"""Image -> visual nodes: patch division, flatten-and-project, positional term."""

from dataclasses import dataclass, field

import numpy as np

from hgfx.errors import ConfigError, DataError, ShapeError
from hgfx.services.layers import Module, parameter
from hgfx.tensor import Tensor, matmul


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, C), values in [0, 1]
    label: int = 0
    name: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"{self.name or 'image'}: expected HxWx1 or HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"{self.name or 'image'}: pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class NodeSet:
    """Node features [..., N, D] plus each node's (row, col) patch position."""

    features: Tensor
    grid_coords: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[-2]

    @property
    def dim(self) -> int:
        return self.features.shape[-1]


def grid_coords(height: int, width: int, patch_size: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange((height // patch_size) * (width // patch_size)), width // patch_size)
    return np.stack([rows, cols], axis=1)


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, patch_size**2 * C), patches in raster order."""
    *lead, h, w, c = pixels.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    blocks = pixels.reshape(*lead, gh, patch_size, gw, patch_size, c)
    blocks = np.moveaxis(blocks, -4, -3)  # (..., gh, gw, p, p, c)
    return blocks.reshape(*lead, gh * gw, patch_size * patch_size * c)


def patch_embed(img: ImageSample, patch_size: int, proj: Tensor, pos: Tensor | None = None) -> NodeSet:
    patches = patchify(img.pixels, patch_size)
    if proj.shape[0] != patches.shape[-1]:
        raise ShapeError(f"projection expects {proj.shape[0]} values per patch, patch has {patches.shape[-1]}")
    features = matmul(Tensor(patches, dtype=proj.dtype), proj)
    if pos is not None:
        features = features + pos
    return NodeSet(features, grid_coords(img.height, img.width, patch_size))


class PatchEmbedding(Module):
    def __init__(self, image_size: int, channels: int, patch_size: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        if image_size % patch_size:
            raise ConfigError(f"image size {image_size} is not divisible by patch size {patch_size}")
        n_nodes = (image_size // patch_size) ** 2
        patch_dim = patch_size * patch_size * channels
        self.proj = parameter(rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, dim)), dtype)
        self.pos = parameter(rng.normal(0.0, 0.02, size=(n_nodes, dim)), dtype)
        self.image_size = image_size
        self.patch_size = patch_size

    def __call__(self, pixels: np.ndarray) -> NodeSet:
        """Embed a batch (B, H, W, C) or a single image (H, W, C)."""
        h, w = pixels.shape[-3], pixels.shape[-2]
        if (h, w) != (self.image_size, self.image_size):
            raise ShapeError(f"expected {self.image_size}x{self.image_size} images, got {h}x{w}")
        patches = Tensor(patchify(pixels, self.patch_size), dtype=self.proj.dtype)
        features = matmul(patches, self.proj) + self.pos
        return NodeSet(features, grid_coords(h, w, self.patch_size))

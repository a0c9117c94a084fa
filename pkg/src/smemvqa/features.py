"""Spatial memory extraction: turn an RGB raster into an L x M feature grid.

Three sources share one output type:

* ``extract_grid_patch`` - fixed per-cell colour/edge statistics (default).
* ``extract_tiny_conv`` - one trainable 5x5 convolution + ReLU.
* ``load_precomputed`` - features computed elsewhere, stored as SMEMFEAT files.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Tensor, add, matmul, relu

GRID_PATCH_DIMS = 12
GRID_PATCH_NAMES = (
    "mean_r", "mean_g", "mean_b",
    "red_frac", "white_frac", "gray_frac",
    "std_r", "std_g", "std_b",
    "grad_x", "grad_y", "edge_density",
)

# 8-bit thresholds
RED_MIN_R, RED_MAX_GB = 200, 80
WHITE_MIN = 230
GRAY_MAX_SPREAD, GRAY_MEAN_LO, GRAY_MEAN_HI = 30, 60, 200

KERNEL = 5
FEAT_MAGIC = b"SMEMFEAT"
FEAT_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise DimensionError(f"pixel array {self.pixels.shape} does not match {self.height}x{self.width}x3")

    @classmethod
    def blank(cls, width: int, height: int, color=(255, 255, 255)) -> "RasterImage":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = color
        return cls(width, height, px)


@dataclass
class SpatialFeatures:
    S: np.ndarray  # (L, M)
    grid: tuple[int, int]
    cells: list[tuple[int, int, int, int]] = field(default_factory=list)  # (y0, y1, x0, x1)

    @property
    def L(self) -> int:
        return self.S.shape[0]

    @property
    def M(self) -> int:
        return self.S.shape[1]

    def __post_init__(self):
        g_r, g_c = self.grid
        if g_r * g_c != self.S.shape[0]:
            raise DimensionError(f"grid {g_r}x{g_c} does not hold {self.S.shape[0]} locations")


def cell_rects(height: int, width: int, g_r: int, g_c: int) -> list[tuple[int, int, int, int]]:
    """Pixel rectangle of every grid cell, row-major, clipped to the image."""
    ch, cw = -(-height // g_r), -(-width // g_c)
    rects = []
    for r in range(g_r):
        for c in range(g_c):
            rects.append((r * ch, min((r + 1) * ch, height), c * cw, min((c + 1) * cw, width)))
    return rects


def _pad_to_grid(px: np.ndarray, g_r: int, g_c: int) -> np.ndarray:
    h, w = px.shape[:2]
    ph, pw = (-h) % g_r, (-w) % g_c
    if ph or pw:
        px = np.pad(px, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return px


def extract_grid_patch(img: RasterImage, g_r: int = 4, g_c: int = 4) -> SpatialFeatures:
    if img.width == 0 or img.height == 0:
        raise ValueError("zero-size image")
    px = _pad_to_grid(img.pixels, g_r, g_c)
    h, w = px.shape[:2]
    ch, cw = h // g_r, w // g_c
    cells = px.reshape(g_r, ch, g_c, cw, 3).transpose(0, 2, 1, 3, 4).astype(np.int64)
    cells = cells.reshape(g_r * g_c, ch, cw, 3)
    r, g, b = cells[..., 0], cells[..., 1], cells[..., 2]

    red = (r > RED_MIN_R) & (g < RED_MAX_GB) & (b < RED_MAX_GB)
    white = (r > WHITE_MIN) & (g > WHITE_MIN) & (b > WHITE_MIN)
    spread = cells.max(axis=-1) - cells.min(axis=-1)
    mean_px = cells.mean(axis=-1)
    gray = (spread < GRAY_MAX_SPREAD) & (mean_px >= GRAY_MEAN_LO) & (mean_px <= GRAY_MEAN_HI)

    rgb = cells / 255.0
    intensity = rgb.mean(axis=-1)
    dx = np.diff(intensity, axis=2) if cw > 1 else np.zeros((len(cells), ch, 1))
    dy = np.diff(intensity, axis=1) if ch > 1 else np.zeros((len(cells), 1, cw))

    S = np.empty((g_r * g_c, GRID_PATCH_DIMS))
    S[:, 0:3] = rgb.mean(axis=(1, 2))
    S[:, 3] = red.mean(axis=(1, 2))
    S[:, 4] = white.mean(axis=(1, 2))
    S[:, 5] = gray.mean(axis=(1, 2))
    S[:, 6:9] = rgb.std(axis=(1, 2))
    S[:, 9] = dx.mean(axis=(1, 2))
    S[:, 10] = dy.mean(axis=(1, 2))
    S[:, 11] = 0.5 * (np.abs(dx).mean(axis=(1, 2)) + np.abs(dy).mean(axis=(1, 2)))
    return SpatialFeatures(S, (g_r, g_c), cell_rects(img.height, img.width, g_r, g_c))


# ------------------------------------------------------------ tiny conv path

def conv_patches(img: RasterImage, g_r: int = 4, g_c: int = 4) -> np.ndarray:
    """Unfolded 5x5x3 input windows, one per grid cell: (L, 75).

    The image is block-averaged to (5*g_r) x (5*g_c) first, so a 5x5 kernel
    at stride 5 covers each cell exactly once.
    """
    if img.width == 0 or img.height == 0:
        raise ValueError("zero-size image")
    px = _pad_to_grid(img.pixels, KERNEL * g_r, KERNEL * g_c).astype(np.float64) / 255.0
    h, w = px.shape[:2]
    bh, bw = h // (KERNEL * g_r), w // (KERNEL * g_c)
    small = px.reshape(KERNEL * g_r, bh, KERNEL * g_c, bw, 3).mean(axis=(1, 3))
    win = small.reshape(g_r, KERNEL, g_c, KERNEL, 3).transpose(0, 2, 1, 3, 4)
    return win.reshape(g_r * g_c, KERNEL * KERNEL * 3)


@dataclass
class TinyConvParams:
    kernels: Tensor  # (75, C)
    bias: Tensor  # (C,)

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "TinyConvParams":
        fan_in, fan_out = KERNEL * KERNEL * 3, channels
        a = np.sqrt(6.0 / (fan_in + fan_out))
        k = Tensor(rng.uniform(-a, a, size=(fan_in, channels)), requires_grad=True, name="conv_k")
        return cls(k, Tensor(np.zeros(channels), requires_grad=True, name="conv_b"))

    def tensors(self) -> dict[str, Tensor]:
        return {"conv_k": self.kernels, "conv_b": self.bias}


def tiny_conv_forward(patches, params: TinyConvParams) -> Tensor:
    """ReLU(patches . K + b) for patches of shape (..., L, 75)."""
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != params.kernels.shape[0] or params.bias.shape != params.kernels.shape[1:]:
        raise DimensionError(
            f"conv geometry mismatch: patches {patches.shape}, kernels {params.kernels.shape}, bias {params.bias.shape}"
        )
    return relu(add(matmul(patches, params.kernels), params.bias))


def extract_tiny_conv(img: RasterImage, params: TinyConvParams, g_r: int = 4, g_c: int = 4) -> SpatialFeatures:
    out = tiny_conv_forward(conv_patches(img, g_r, g_c), params)
    return SpatialFeatures(out.data.copy(), (g_r, g_c), cell_rects(img.height, img.width, g_r, g_c))


# ------------------------------------------------------- precomputed files

def infer_grid(L: int) -> tuple[int, int]:
    side = int(round(L ** 0.5))
    return (side, side) if side * side == L else (1, L)


def save_precomputed(path, feats) -> None:
    S = feats.S if isinstance(feats, SpatialFeatures) else np.asarray(feats)
    L, M = S.shape
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<III", FEAT_VERSION, L, M))
        f.write(np.asarray(S, dtype="<f4").tobytes())


def load_precomputed(path, grid: tuple[int, int] | None = None) -> SpatialFeatures:
    """Read an SMEMFEAT file: magic, u32 version, u32 L, u32 M, L*M LE float32."""
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:8] != FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic at byte offset 0")
    if len(blob) < 20:
        raise FeatureFormatError(f"{path}: truncated header, expected 20 bytes, file ends at offset {len(blob)}")
    version, L, M = struct.unpack_from("<III", blob, 8)
    if version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte offset 8")
    if L == 0 or M == 0:
        raise FeatureFormatError(f"{path}: empty feature grid L={L} M={M} at byte offset 12")
    end = 20 + 4 * L * M
    if len(blob) < end:
        raise FeatureFormatError(f"{path}: truncated payload, expected {end} bytes, file ends at offset {len(blob)}")
    if len(blob) > end:
        raise FeatureFormatError(f"{path}: {len(blob) - end} trailing bytes after offset {end}")
    S = np.frombuffer(blob, dtype="<f4", count=L * M, offset=20).astype(np.float64).reshape(L, M)
    if not np.isfinite(S).all():
        raise FeatureFormatError(f"{path}: non-finite feature values")
    g = grid or infer_grid(L)
    return SpatialFeatures(S, g)

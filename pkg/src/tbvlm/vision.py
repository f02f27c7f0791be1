"""Patch-based visual encoder for single-channel radiographs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .layers import encoder_block, linear, norm
from .params import check_params
from .tensor import ContractError, Tensor


class PatchError(ValueError):
    pass


@dataclass
class ImageGrid:
    pixels: np.ndarray  # (height, width), values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"ImageGrid expects a 2-D pixel array, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("ImageGrid pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchSequence:
    patches: np.ndarray  # (n_patches, patch_size**2), row-major grid order
    patch_size: int
    grid_rows: int
    grid_cols: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


def patchify_array(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W) -> (..., n_patches, P*P) in row-major grid order."""
    *lead, H, W = pixels.shape
    P = patch_size
    if P < 1 or H % P or W % P:
        raise PatchError(f"image {H}x{W} (H={H}, W={W}) is not divisible by patch size P={P}")
    gh, gw = H // P, W // P
    x = pixels.reshape(*lead, gh, P, gw, P)
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, P, P)
    return x.reshape(*lead, gh * gw, P * P)


def patchify(img: ImageGrid, patch_size: int) -> PatchSequence:
    patches = patchify_array(img.pixels, patch_size)
    return PatchSequence(patches, patch_size, img.height // patch_size, img.width // patch_size)


def unpatchify(seq: PatchSequence) -> ImageGrid:
    P, gh, gw = seq.patch_size, seq.grid_rows, seq.grid_cols
    if seq.patches.shape != (gh * gw, P * P):
        raise ContractError(
            f"patch array {seq.patches.shape} inconsistent with grid {gh}x{gw} of {P}x{P} patches")
    x = seq.patches.reshape(gh, gw, P, P)
    x = np.moveaxis(x, 2, 1)
    return ImageGrid(x.reshape(gh * P, gw * P))


def encode_patches(patches, params: Mapping[str, Tensor], cfg: ModelConfig,
                   mask: Optional[np.ndarray] = None) -> Tensor:
    """Encode a batch of patch rows (B, N, P*P) into (B, N, d_vision).

    ``mask`` (B, N) boolean marks patches whose embedding is swapped for the
    learned mask token before positions are added.
    """
    x = linear(T.as_tensor(patches), params, "vision.patch")
    if mask is not None:
        m = mask[..., None].astype(np.float64)
        x = T.add(T.mul(x, 1.0 - m), T.mul(params["mim.mask_token"], m))
    x = T.add(x, params["vision.pos"])
    for i in range(cfg.vision_layers):
        x = encoder_block(x, params, f"vision.blocks.{i}", cfg.vision_heads, cfg.ln_eps)
    return norm(x, params, "vision.ln_f", cfg.ln_eps)


def encode_image(img: ImageGrid, params: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Visual embeddings (n_patches, d_vision) for one image."""
    check_params(params, cfg)
    if (img.height, img.width) != (cfg.image_size, cfg.image_size):
        raise ContractError(f"image {img.height}x{img.width} does not match config "
                            f"image_size {cfg.image_size}")
    out = encode_patches(patchify(img, cfg.patch_size).patches[None], params, cfg)
    return T.reshape(out, out.shape[1:])

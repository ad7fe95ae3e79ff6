"""Image and deformation-field containers plus the differentiable pull-back warp.

The displacement convention throughout is pull-back: ``output(v) = input(v + phi(v))``,
with ``phi`` stored as a ``2 x H x W`` array of (row, col) offsets in pixel units.
Sampling outside the image clamps to the border.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class ImageGrid:
    """Dense 2D scalar field. ``data`` is H x W; training images live in [-1, 1]."""

    data: np.ndarray
    modality_tag: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"ImageGrid data must be 2D, got shape {self.data.shape}")
        if self.data.size == 0:
            raise ValueError("ImageGrid data must be non-empty")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ImageGrid data contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def is_normalized(self) -> bool:
        return bool(self.data.min() >= -1.0 and self.data.max() <= 1.0)


@dataclass
class DeformationField:
    """Per-pixel displacement vectors, shape ``2 x H x W`` (row offsets, col offsets)."""

    displacements: np.ndarray

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements)
        if self.displacements.ndim != 3 or self.displacements.shape[0] != 2:
            raise ValueError(
                f"DeformationField must be 2xHxW, got shape {self.displacements.shape}"
            )
        if not np.all(np.isfinite(self.displacements)):
            raise ValueError("DeformationField contains non-finite values")

    @property
    def height(self) -> int:
        return self.displacements.shape[1]

    @property
    def width(self) -> int:
        return self.displacements.shape[2]

    def magnitude(self) -> np.ndarray:
        """Per-pixel Euclidean displacement length, H x W."""
        return np.sqrt((self.displacements.astype(np.float64) ** 2).sum(axis=0))


@dataclass
class MaskGrid:
    """Integer label map, 0 = background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError(f"MaskGrid labels must be 2D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"MaskGrid labels must be integer, got {self.labels.dtype}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def labels_present(self) -> list[int]:
        vals = np.unique(self.labels)
        return [int(v) for v in vals if v != 0]


def identity_field(height: int, width: int) -> DeformationField:
    """All-zero displacement field; warping with it is the exact identity."""
    if height <= 0 or width <= 0:
        raise ValueError(f"dimensions must be positive, got ({height}, {width})")
    return DeformationField(np.zeros((2, height, width), dtype=np.float32))


def _gather2d(image: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """Pick image[b, c, rows[b, i, j], cols[b, i, j]] -> (B, C, H, W)."""
    b, c, h, w = image.shape
    flat_idx = (rows * w + cols).reshape(b, 1, -1).expand(b, c, -1)
    return image.reshape(b, c, h * w).gather(2, flat_idx).reshape(b, c, h, w)


def warp_tensor(image: torch.Tensor, flow: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Differentiable pull-back warp of a batched image.

    Args:
        image: (B, C, H, W) tensor.
        flow: (B, 2, H, W) displacements in pixels, channel 0 = row, 1 = col.
        mode: "bilinear" or "nearest".

    Returns:
        (B, C, H, W) tensor with ``out[..., i, j] = image sampled at (i, j) + flow[..., i, j]``,
        border-clamped. Differentiable w.r.t. both image and flow when bilinear.
    """
    if image.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected image (B,C,H,W) and flow (B,2,H,W), got {tuple(image.shape)} and {tuple(flow.shape)}")
    if image.shape[0] != flow.shape[0] or image.shape[2:] != flow.shape[2:]:
        raise ValueError(f"image/flow shape mismatch: {tuple(image.shape)} vs {tuple(flow.shape)}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")

    b, _, h, w = image.shape
    dtype = flow.dtype if flow.is_floating_point() else torch.float32
    base_r = torch.arange(h, dtype=dtype, device=image.device).view(1, h, 1)
    base_c = torch.arange(w, dtype=dtype, device=image.device).view(1, 1, w)
    src_r = (base_r + flow[:, 0]).clamp(0, h - 1)
    src_c = (base_c + flow[:, 1]).clamp(0, w - 1)

    if mode == "nearest":
        r = torch.floor(src_r + 0.5).long().clamp(0, h - 1)
        c = torch.floor(src_c + 0.5).long().clamp(0, w - 1)
        return _gather2d(image, r, c)

    r0f = torch.floor(src_r)
    c0f = torch.floor(src_c)
    fr = (src_r - r0f).unsqueeze(1)
    fc = (src_c - c0f).unsqueeze(1)
    r0 = r0f.long().clamp(0, h - 1)
    c0 = c0f.long().clamp(0, w - 1)
    r1 = (r0 + 1).clamp(0, h - 1)
    c1 = (c0 + 1).clamp(0, w - 1)

    v00 = _gather2d(image, r0, c0)
    v01 = _gather2d(image, r0, c1)
    v10 = _gather2d(image, r1, c0)
    v11 = _gather2d(image, r1, c1)
    return (
        v00 * (1 - fr) * (1 - fc)
        + v01 * (1 - fr) * fc
        + v10 * fr * (1 - fc)
        + v11 * fr * fc
    )


def warp(image, field: DeformationField, interpolation: str = "bilinear"):
    """Warp an ImageGrid or MaskGrid by ``field`` (pull-back, border clamp).

    Masks must use nearest interpolation so that only input labels appear
    in the output.
    """
    if isinstance(image, MaskGrid):
        if interpolation != "nearest":
            raise ValueError("MaskGrid warping requires nearest interpolation")
        arr = image.labels
        if arr.shape != (field.height, field.width):
            raise ValueError(f"mask shape {arr.shape} does not match field {(field.height, field.width)}")
        t = torch.from_numpy(arr.astype(np.int64))[None, None]
        flow = torch.from_numpy(field.displacements.astype(np.float64))[None]
        out = warp_tensor(t.to(torch.float64), flow, mode="nearest")
        return MaskGrid(out[0, 0].numpy().astype(arr.dtype))
    if isinstance(image, ImageGrid):
        arr = image.data
        tag = image.modality_tag
    else:
        arr = np.asarray(image)
        tag = ""
    if arr.shape != (field.height, field.width):
        raise ValueError(f"image shape {arr.shape} does not match field {(field.height, field.width)}")
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    t = torch.from_numpy(arr.astype(dtype))[None, None]
    flow = torch.from_numpy(field.displacements.astype(dtype))[None]
    out = warp_tensor(t, flow, mode=interpolation)
    return ImageGrid(out[0, 0].numpy(), modality_tag=tag)


def jacobian_stats(field: DeformationField) -> dict:
    """Folding diagnostics of the map ``v -> v + phi(v)``.

    Determinants use central differences (one-sided at borders). Returns the
    fraction of pixels with det <= 0 and the minimum determinant.
    """
    d = field.displacements.astype(np.float64)
    if field.height < 2 or field.width < 2:
        raise ValueError("field must be at least 2x2 for finite differences")
    dr_dr, dr_dc = np.gradient(d[0])
    dc_dr, dc_dc = np.gradient(d[1])
    det = (1.0 + dr_dr) * (1.0 + dc_dc) - dr_dc * dc_dr
    return {
        "fraction_nonpositive": float(np.mean(det <= 0.0)),
        "min_det": float(det.min()),
    }

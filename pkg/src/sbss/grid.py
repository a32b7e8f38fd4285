"""Raster helpers shared by the whole engine.

Arrays are plain numpy:

* probability maps: ``float32`` of shape ``(C, H, W)``
* RGB images: ``uint8`` of shape ``(H, W, 3)``
* label maps: ``uint8`` of shape ``(H, W)``, with ``IGNORE`` marking unlabeled pixels
* confidence maps: ``float32`` of shape ``(H, W)``

All resizing uses half-pixel centers: output pixel ``d`` samples the source at
``(d + 0.5) * in / out - 0.5``, clamped to the valid range.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE = 255


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class PatchGrid:
    host_h: int
    host_w: int
    patch_h: int
    patch_w: int
    padded_h: int
    padded_w: int
    rects: tuple[Rect, ...]

    def __len__(self) -> int:
        return len(self.rects)

    @property
    def rows(self) -> int:
        return self.padded_h // self.patch_h

    @property
    def cols(self) -> int:
        return self.padded_w // self.patch_w

    def host_part(self, rect: Rect) -> Rect:
        """Intersection of ``rect`` with the unpadded host raster."""
        return Rect(rect.x, rect.y,
                    max(0, min(rect.w, self.host_w - rect.x)),
                    max(0, min(rect.h, self.host_h - rect.y)))


def _check_dims(out_h: int, out_w: int) -> None:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be at least 1x1, got {out_h}x{out_w}")


def _axis_weights(n_in: int, n_out: int):
    d = np.arange(n_out, dtype=np.float64)
    src = (d + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of the last two axes, computed in float64.

    No renormalization or rounding happens here; callers decide.
    """
    _check_dims(out_h, out_w)
    a = np.asarray(arr, dtype=np.float64)
    h, w = a.shape[-2:]
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy[:, None]
    rows = a[..., y0, :] * (1.0 - fy) + a[..., y1, :] * fy
    return rows[..., x0] * (1.0 - fx) + rows[..., x1] * fx


def normalize(probs: np.ndarray) -> np.ndarray:
    """Rescale each pixel's channel vector to sum to one; returns float32."""
    p = np.asarray(probs, dtype=np.float64)
    p = np.clip(p, 0.0, None)
    return (p / p.sum(axis=0, keepdims=True)).astype(np.float32)


def resize_probmap(probs: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_dims(out_h, out_w)
    if probs.shape[1:] == (out_h, out_w):
        return np.array(probs, dtype=np.float32, copy=True)
    return normalize(bilinear(probs, out_h, out_w))


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``(H, W, 3)`` or gray ``(H, W)`` 8-bit image."""
    _check_dims(out_h, out_w)
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    chw = np.moveaxis(img, -1, 0) if img.ndim == 3 else img
    out = bilinear(chw, out_h, out_w)
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return np.ascontiguousarray(np.moveaxis(out, 0, -1) if img.ndim == 3 else out)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # floor(src + 0.5) with src = (d + 0.5) * in / out - 0.5, kept in integers
    d = np.arange(n_out, dtype=np.int64)
    return np.minimum(((2 * d + 1) * n_in) // (2 * n_out), n_in - 1)


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    _check_dims(out_h, out_w)
    h, w = labels.shape
    iy = _nearest_index(h, out_h)
    ix = _nearest_index(w, out_w)
    return labels[iy[:, None], ix[None, :]].copy()


def confidence_map(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=0)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return np.argmax(probs, axis=0).astype(np.uint8)


def scaled_dims(h: int, w: int, scale: float) -> tuple[int, int]:
    """Raster size at ``scale``, rounded half up and never below one pixel."""
    return (max(1, int(np.floor(h * scale + 0.5))),
            max(1, int(np.floor(w * scale + 0.5))))


def make_patch_grid(host_h: int, host_w: int, patch_h: int, patch_w: int) -> PatchGrid:
    if patch_h < 1 or patch_w < 1:
        raise ValueError(f"patch size must be positive, got {patch_h}x{patch_w}")
    if host_h < 1 or host_w < 1:
        raise ValueError(f"host size must be positive, got {host_h}x{host_w}")
    if patch_h > 4 * host_h or patch_w > 4 * host_w:
        raise ValueError(
            f"patch {patch_h}x{patch_w} is more than 4x the host raster {host_h}x{host_w}")
    padded_h = -(-host_h // patch_h) * patch_h
    padded_w = -(-host_w // patch_w) * patch_w
    rects = tuple(Rect(x, y, patch_w, patch_h)
                  for y in range(0, padded_h, patch_h)
                  for x in range(0, padded_w, patch_w))
    return PatchGrid(host_h, host_w, patch_h, patch_w, padded_h, padded_w, rects)


def pad_to(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Reflection-pad a raster on the bottom and right up to ``out_h x out_w``.

    Works on ``(H, W)``, ``(C, H, W)`` and uint8 ``(H, W, 3)`` arrays.
    """
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.dtype == np.uint8:
        hax = 0
    else:
        hax = arr.ndim - 2
    h, w = arr.shape[hax], arr.shape[hax + 1]
    if (h, w) == (out_h, out_w):
        return arr
    widths = [(0, 0)] * arr.ndim
    widths[hax] = (0, out_h - h)
    widths[hax + 1] = (0, out_w - w)
    # a single row/column has nothing to reflect about
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(arr, widths, mode=mode)


def crop(arr: np.ndarray, rect: Rect) -> np.ndarray:
    """Copy of ``rect`` from a map (``(C,H,W)``), label map or confidence map."""
    ys, xs = rect.slices()
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.dtype == np.uint8:
        return arr[ys, xs].copy()
    return arr[..., ys, xs].copy()


def paste(dst: np.ndarray, src: np.ndarray, rect: Rect) -> np.ndarray:
    """Write ``src`` into ``rect`` of ``dst`` in place and return ``dst``."""
    ys, xs = rect.slices()
    if dst.ndim == 3 and dst.shape[-1] == 3 and dst.dtype == np.uint8:
        dst[ys, xs] = src
    else:
        dst[..., ys, xs] = src
    return dst

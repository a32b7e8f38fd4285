"""Segmentation-map providers.

A backend turns an image patch at a given resizing scale into a probability
map of the same size.  Two are provided:

``FileBackend``
    serves maps precomputed by any external model, listed in a JSON manifest.
``OracleBackend``
    a synthetic network whose per-class error rate depends on how far the
    resizing scale is from the class's preferred scale.  It reads the ground
    truth of the scene and corrupts it pixel by pixel.
"""
from __future__ import annotations

import json
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .grid import IGNORE, Rect, _nearest_index, crop, pad_to, resize_labels, scaled_dims

# UperNet/ConvNeXt-T at 1024x512 costs 467.15 GFlops per patch
DEFAULT_FLOPS_PER_PIXEL = 467.15e9 / (1024 * 512)


class MissingMapError(LookupError):
    def __init__(self, key, scale):
        self.key, self.scale = key, scale
        super().__init__(f"no map for image {key.image_id!r} rect {key.rect.as_list()} "
                         f"at scale {scale}")


@dataclass(frozen=True)
class PatchKey:
    """Identifies a patch: source image and its rect in the padded scaled raster."""
    image_id: str
    rect: Rect


def scale_key(scale: float) -> int:
    # scales are compared at micro-unit resolution everywhere
    return int(round(float(scale) * 1_000_000))


@dataclass(frozen=True)
class OracleConfig:
    classes: int
    preferred_scales: tuple
    e_min: float = 0.05
    e_max: float = 0.5
    gain: float = 0.15
    sharpness: float = 3.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "preferred_scales", tuple(float(s) for s in self.preferred_scales))
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if len(self.preferred_scales) != self.classes:
            raise ValueError(f"preferred_scales needs {self.classes} entries, "
                             f"got {len(self.preferred_scales)}")
        if any(s <= 0 for s in self.preferred_scales):
            raise ValueError("preferred_scales must be positive")
        if not 0.0 <= self.e_min < 1.0:
            raise ValueError(f"e_min must be in [0, 1), got {self.e_min}")
        if not self.e_min < self.e_max <= 1.0:
            raise ValueError(f"e_max must be in (e_min, 1], got {self.e_max}")
        if self.gain < 0:
            raise ValueError(f"gain must be >= 0, got {self.gain}")
        if self.sharpness <= 0:
            raise ValueError(f"sharpness must be > 0, got {self.sharpness}")


def oracle_error_rate(cfg: OracleConfig, cls: int, scale: float) -> float:
    d = np.log2(scale) - np.log2(cfg.preferred_scales[cls])
    return float(min(cfg.e_max, cfg.e_min + cfg.gain * d * d))


class OracleBackend:
    """Scale-biased synthetic segmentation network.

    Each ground-truth pixel of class ``c`` is corrupted with probability
    ``oracle_error_rate(cfg, c, scale)``.  A corrupted pixel puts mass ``1 - eps``
    on a uniformly drawn wrong class, a correct pixel puts ``1 - delta`` on its
    true class, with the remainder spread evenly over the other classes::

        eps   = m * U          (errors are unsure)
        delta = m * U ** sharpness

    where ``U ~ Uniform(0, 1)`` and ``m`` keeps the top class strictly on top.
    Draws are made per ground-truth pixel; every pixel of the scaled map that
    samples the same ground-truth pixel shares its outcome, so upscaling adds no
    independent samples that a later downscale could average away.
    Random draws come from a substream keyed by (seed, image, scale, rect), so
    results do not depend on call order or threading.
    """

    kind = "oracle"

    def __init__(self, cfg: OracleConfig, labels: dict, flops_per_pixel=DEFAULT_FLOPS_PER_PIXEL):
        if flops_per_pixel <= 0:
            raise ValueError("flops_per_pixel must be positive")
        self.cfg = cfg
        self.labels = dict(labels)
        self.flops_per_pixel = float(flops_per_pixel)
        self._rates = {}
        self._scaled = {}
        self._lock = threading.Lock()

    @classmethod
    def for_scenes(cls, cfg, scenes, **kw):
        return cls(cfg, dict(zip(scenes.ids, scenes.labels)), **kw)

    def _rate_table(self, scale):
        k = scale_key(scale)
        with self._lock:
            table = self._rates.get(k)
            if table is None:
                table = np.array([oracle_error_rate(self.cfg, c, scale)
                                  for c in range(self.cfg.classes)] + [0.0])
                self._rates[k] = table
        return table

    def _labels_at(self, key: PatchKey, scale):
        image_id = key.image_id
        k = (image_id, scale_key(scale))
        with self._lock:
            lab = self._scaled.get(k)
        if lab is None:
            try:
                gt = self.labels[image_id]
            except KeyError:
                raise MissingMapError(key, scale) from None
            lab = resize_labels(gt, *scaled_dims(*gt.shape, scale))
            with self._lock:
                self._scaled[k] = lab
        return lab

    def _rng(self, key: PatchKey, scale):
        r = key.rect
        ident = zlib.crc32(key.image_id.encode("utf-8"))
        return np.random.default_rng([self.cfg.seed, ident, scale_key(scale), r.x, r.y, r.w, r.h])

    def segment(self, image_patch, scale, key: PatchKey):
        r = key.rect
        if image_patch.shape[:2] != (r.h, r.w):
            raise ValueError(f"patch is {image_patch.shape[:2]}, rect says {(r.h, r.w)}")
        lab = self._labels_at(key, scale)
        sh, sw = lab.shape
        lab = crop(pad_to(lab, max(sh, r.y + r.h), max(sw, r.x + r.w)), r)
        C = self.cfg.classes
        # draws live on the ground-truth raster: scaled pixels that sample the
        # same source pixel share its outcome (padding rows reuse the last one)
        gh, gw = self.labels[key.image_id].shape
        iy = _nearest_index(gh, sh)[np.minimum(np.arange(r.y, r.y + r.h), sh - 1)]
        ix = _nearest_index(gw, sw)[np.minimum(np.arange(r.x, r.x + r.w), sw - 1)]
        y0, x0 = iy.min(), ix.min()
        src = (iy.max() - y0 + 1, ix.max() - x0 + 1)
        at = ((iy - y0)[:, None], (ix - x0)[None, :])
        rng = self._rng(key, scale)
        u_err = rng.random(src)[at]
        shift = rng.integers(1, C, size=src)[at]
        u_conf = rng.random(src)[at]

        ignore = lab == IGNORE
        cls = np.where(ignore, 0, lab).astype(np.int64)
        rate = self._rate_table(scale)[np.where(ignore, C, cls)]
        corrupt = u_err < rate
        top = np.where(corrupt, (cls + shift) % C, cls)
        m = 0.98 * (C - 1) / C
        rest = np.where(corrupt, m * u_conf, m * u_conf ** self.cfg.sharpness)
        probs = np.empty((C,) + lab.shape, dtype=np.float64)
        probs[:] = rest / (C - 1)
        np.put_along_axis(probs, top[None], (1.0 - rest)[None], axis=0)
        probs[:, ignore] = 1.0 / C
        return probs.astype(np.float32)


@dataclass
class ManifestRecord:
    image_id: str
    scale: float
    rect: Rect
    path: str


class FileBackend:
    """Serves maps listed in a manifest: ``[{image_id, scale, rect, path}, ...]``.

    Relative paths are resolved against the manifest's directory.  Maps are
    loaded lazily and cached.
    """

    kind = "file"

    def __init__(self, records, flops_per_pixel=DEFAULT_FLOPS_PER_PIXEL, root="."):
        if flops_per_pixel <= 0:
            raise ValueError("flops_per_pixel must be positive")
        self.flops_per_pixel = float(flops_per_pixel)
        self.root = Path(root)
        self._index = {}
        for rec in records:
            self._index[(rec.image_id, scale_key(rec.scale), rec.rect)] = rec
        self._cache = {}
        self._lock = threading.Lock()

    @classmethod
    def from_manifest(cls, path, flops_per_pixel=DEFAULT_FLOPS_PER_PIXEL):
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        if isinstance(raw, dict):
            raw = raw.get("records", [])
        records = []
        for i, r in enumerate(raw):
            try:
                records.append(ManifestRecord(str(r["image_id"]), float(r["scale"]),
                                              Rect(*map(int, r["rect"])), str(r["path"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise formats.CorruptFileError(path, f"record {i}: {exc!r}") from None
        return cls(records, flops_per_pixel, root=path.parent)

    def segment(self, image_patch, scale, key: PatchKey):
        rec = self._index.get((key.image_id, scale_key(scale), key.rect))
        if rec is None:
            raise MissingMapError(key, scale)
        with self._lock:
            arr = self._cache.get(rec.path)
        if arr is None:
            arr = formats.read_tns(self.root / rec.path)
            with self._lock:
                self._cache[rec.path] = arr
        r = key.rect
        if arr.ndim != 3 or arr.shape[1:] != (r.h, r.w) or image_patch.shape[:2] != (r.h, r.w):
            raise formats.CorruptFileError(
                self.root / rec.path, f"map shape {arr.shape} does not match patch {(r.h, r.w)}")
        return arr.copy()


class RecordingBackend:
    """Wraps a backend and stores every map it serves as .tns plus a manifest.

    Replaying the manifest through ``FileBackend`` reproduces the wrapped run.
    """

    def __init__(self, inner, out_dir):
        self.inner = inner
        self.kind = inner.kind
        self.flops_per_pixel = inner.flops_per_pixel
        self.out_dir = formats.ensure_dir(out_dir)
        self.records = []
        self._lock = threading.Lock()

    def segment(self, image_patch, scale, key: PatchKey):
        probs = self.inner.segment(image_patch, scale, key)
        r = key.rect
        name = f"{key.image_id}_s{scale_key(scale)}_{r.x}_{r.y}_{r.w}_{r.h}.tns"
        formats.write_tns(self.out_dir / name, probs)
        with self._lock:
            self.records.append({"image_id": key.image_id, "scale": float(scale),
                                 "rect": r.as_list(), "path": name})
        return probs

    def write_manifest(self, name="manifest.json"):
        recs = sorted(self.records, key=lambda d: (d["image_id"], d["scale"], d["rect"][1], d["rect"][0]))
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(recs, fh, indent=1)
        return path


# --- synthetic scenes ---------------------------------------------------------

PALETTE = np.array([
    [70, 130, 60], [200, 200, 190], [60, 90, 200], [180, 60, 50],
    [230, 200, 40], [120, 60, 160], [40, 180, 180], [140, 100, 60],
], dtype=np.float64)


@dataclass(frozen=True)
class SceneProfile:
    """Per-class area fractions and typical region sizes.

    Class 0 is the background and takes whatever area the others leave.
    ``radius[c]`` is a region's typical half-extent relative to the shorter
    image side; it is ignored for class 0.
    """
    fractions: tuple
    radius: tuple

    def __post_init__(self):
        if len(self.fractions) != len(self.radius):
            raise ValueError("fractions and radius must have equal length")
        if len(self.fractions) < 2:
            raise ValueError(f"need at least 2 classes, got {len(self.fractions)}")
        if any(f < 0 for f in self.fractions) or sum(self.fractions[1:]) >= 1:
            raise ValueError("foreground fractions must be non-negative and sum below 1")
        if any(r <= 0 for r in self.radius[1:]):
            raise ValueError("radius must be positive")

    @property
    def classes(self):
        return len(self.fractions)

    @classmethod
    def default(cls, classes):
        """Foreground classes from large regions (class 1) down to small ones."""
        if classes < 2:
            raise ValueError(f"need at least 2 classes, got {classes}")
        fg = classes - 1
        fracs = [0.45 / fg] * fg
        radius = list(np.geomspace(0.22, 0.05, fg)) if fg > 1 else [0.15]
        return cls(tuple([1.0 - sum(fracs)] + fracs), tuple([1.0] + radius))


@dataclass
class SceneSet:
    ids: list
    images: list = field(repr=False)
    labels: list = field(repr=False)
    profile: SceneProfile = None

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.images, self.labels))


def _paint(labels, cls, target, radius, rng):
    h, w = labels.shape
    side = min(h, w)
    count = 0
    for _ in range(400):
        if count >= target:
            break
        ry = max(1.0, radius * side * rng.uniform(0.6, 1.4))
        rx = max(1.0, ry * rng.uniform(0.6, 1.6))
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ellipse = rng.random() < 0.5
        y0, y1 = int(max(0, np.floor(cy - ry))), int(min(h, np.ceil(cy + ry)))
        x0, x1 = int(max(0, np.floor(cx - rx))), int(min(w, np.ceil(cx + rx)))
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        if ellipse:
            inside = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
        else:
            inside = np.ones(yy.shape, dtype=bool)
        region = labels[y0:y1, x0:x1]
        inside &= region == 0
        # stop at the target so the realized area fraction tracks the profile
        need = target - count
        n_in = int(inside.sum())
        if n_in > need:
            order = np.argsort((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2, axis=None, kind="stable")
            keep = np.zeros(inside.size, dtype=bool)
            flat_inside = inside.ravel()
            sel = order[flat_inside[order]][:need]
            keep[sel] = True
            inside = keep.reshape(inside.shape)
            n_in = need
        region[inside] = cls
        count += n_in
    return count


def generate_scenes(profile: SceneProfile, count: int, dims, seed: int = 0,
                    prefix: str = "scene") -> SceneSet:
    """Random scenes of rectangles and ellipses with a noisy per-class colour."""
    if profile.classes < 2:
        raise ValueError("need at least 2 classes")
    h, w = dims
    ss = np.random.SeedSequence(seed)
    ids, images, labels = [], [], []
    for i, child in enumerate(ss.spawn(count)):
        rng = np.random.default_rng(child)
        lab = np.zeros((h, w), dtype=np.uint8)
        for c in range(1, profile.classes):
            target = int(round(profile.fractions[c] * h * w))
            _paint(lab, c, target, profile.radius[c], rng)
        colors = PALETTE[np.arange(profile.classes) % len(PALETTE)]
        img = colors[lab] + rng.normal(0.0, 12.0, size=(h, w, 3))
        images.append(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8))
        labels.append(lab)
        ids.append(f"{prefix}{i:04d}")
    return SceneSet(ids, images, labels, profile)

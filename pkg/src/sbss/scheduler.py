"""Error correction schemes, patch selection and compute accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .grid import PatchGrid, Rect, normalize, resize_probmap

SCHEMES = ("ecs_ms", "ecs_ss", "baseline_ms", "baseline_ss", "custom")

MS_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


def exact(x) -> Fraction:
    """Exact rational value; floats are read as their shortest decimal repr."""
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class ScaleSchedule:
    scales: tuple
    fractions: tuple
    patch: tuple
    scheme: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "fractions", tuple(exact(f) for f in self.fractions))
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme: unknown {self.scheme!r}, expected one of {SCHEMES}")
        if not self.scales:
            raise ValueError("scales: at least one scale is required")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales: must be positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales: must be strictly increasing, got {self.scales}")
        if len(self.fractions) != len(self.scales):
            raise ValueError(f"fractions: need {len(self.scales)} entries, got {len(self.fractions)}")
        if any(f < 0 or f > 1 for f in self.fractions):
            raise ValueError("fractions: must lie in [0, 1]")
        if self.fractions[0] != 1:
            raise ValueError("fractions: the first scale must be fully covered (fraction 1)")
        if len(self.patch) != 2 or min(self.patch) < 1:
            raise ValueError(f"patch: need two positive dims, got {self.patch}")

    def __len__(self):
        return len(self.scales)

    @property
    def transitions(self) -> int:
        return len(self.scales) - 1


def ecs_ms(patch) -> ScaleSchedule:
    """Multi-scale-level budget: the MS scale set without 1.75, every patch."""
    return ScaleSchedule((0.5, 0.75, 1.0, 1.25, 1.5), (1,) * 5, patch, "ecs_ms")


def ecs_ss(patch) -> ScaleSchedule:
    """Single-scale-level budget: four scales, a quarter and a twelfth at the top two."""
    return ScaleSchedule((0.25, 0.5, 1.0, 1.5), (1, 1, Fraction(1, 4), Fraction(1, 12)),
                         patch, "ecs_ss")


def baseline_ms(patch, scales=MS_SCALES) -> ScaleSchedule:
    return ScaleSchedule(scales, (1,) * len(scales), patch, "baseline_ms")


def baseline_ss(patch) -> ScaleSchedule:
    return ScaleSchedule((1.0,), (1,), patch, "baseline_ss")


PRESETS = {"ecs_ms": ecs_ms, "ecs_ss": ecs_ss, "ms": baseline_ms, "ss": baseline_ss}


def schedule_ratio(schedule: ScaleSchedule) -> float:
    """Processed area relative to the original image: sum of f * s^2."""
    total = sum((f * exact(s) ** 2 for s, f in zip(schedule.scales, schedule.fractions)),
                Fraction(0))
    return float(total)


def selection_count(fraction, n: int) -> int:
    f = exact(fraction)
    if f == 0:
        return 0
    if n == 0:
        raise ValueError("cannot select from an empty patch grid")
    # round half up, never below one patch
    return min(n, max(1, int(f * n + Fraction(1, 2))))


def patch_scores(conf: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Mean confidence of each patch over its unpadded pixels."""
    if conf.shape != (grid.host_h, grid.host_w):
        raise ValueError(f"confidence map {conf.shape} does not match grid host "
                         f"{(grid.host_h, grid.host_w)}")
    scores = np.empty(len(grid), dtype=np.float64)
    for i, r in enumerate(grid.rects):
        hp = grid.host_part(r)
        scores[i] = conf[hp.y:hp.y + hp.h, hp.x:hp.x + hp.w].mean(dtype=np.float64)
    return scores


def select_patches(schedule: ScaleSchedule, scale_index: int, conf: np.ndarray,
                   grid: PatchGrid) -> list[Rect]:
    """Patches to correct at ``schedule.scales[scale_index]``, in grid order.

    Everything when the fraction is 1, otherwise the ``k`` patches with the
    lowest mean confidence (ties go to the earlier patch in row-major order).
    """
    f = schedule.fractions[scale_index]
    n = len(grid)
    k = selection_count(f, n)
    if k == n:
        return list(grid.rects)
    if k == 0:
        return []
    order = np.argsort(patch_scores(conf, grid), kind="stable")
    return [grid.rects[i] for i in sorted(order[:k])]


def ms_vote(maps, out_h: int, out_w: int) -> np.ndarray:
    """Average voting of maps from several scales at a common size."""
    if not maps:
        raise ValueError("need at least one map")
    acc = np.zeros((maps[0].shape[0], out_h, out_w), dtype=np.float64)
    for m in maps:
        acc += resize_probmap(m, out_h, out_w)
    return normalize(acc / len(maps))


@dataclass
class BudgetLedger:
    """Pixels fed to the backend and the correction network, per scale."""

    original_pixels: int
    backend_flops_per_pixel: float = 0.0
    ecn_flops_per_pixel: float = 0.0
    per_scale: dict = field(default_factory=dict)

    def record(self, scale, pixels_backend: int, pixels_ecn: int = 0, slack: int = 0,
               patches: int = 0) -> "BudgetLedger":
        e = self.per_scale.setdefault(float(scale), dict(backend=0, ecn=0, slack=0, patches=0))
        e["backend"] += int(pixels_backend)
        e["ecn"] += int(pixels_ecn)
        e["slack"] += int(slack)
        e["patches"] += int(patches)
        return self

    @property
    def backend_pixels(self) -> int:
        return sum(e["backend"] for e in self.per_scale.values())

    @property
    def ecn_pixels(self) -> int:
        return sum(e["ecn"] for e in self.per_scale.values())

    @property
    def slack_pixels(self) -> int:
        return sum(e["slack"] for e in self.per_scale.values())

    @property
    def ratio(self) -> float:
        return float(Fraction(self.backend_pixels, self.original_pixels))

    @property
    def flops(self) -> float:
        return (self.backend_pixels * self.backend_flops_per_pixel
                + self.ecn_pixels * self.ecn_flops_per_pixel)

    def report(self) -> dict:
        scales = []
        for s in sorted(self.per_scale):
            e = self.per_scale[s]
            scales.append(dict(
                scale=s, patches=e["patches"], backend_pixels=e["backend"],
                ecn_pixels=e["ecn"], padding_slack_pixels=e["slack"],
                ratio=float(Fraction(e["backend"], self.original_pixels)),
                flops=e["backend"] * self.backend_flops_per_pixel
                + e["ecn"] * self.ecn_flops_per_pixel))
        return dict(original_pixels=self.original_pixels, ratio=self.ratio,
                    padding_slack_pixels=self.slack_pixels,
                    backend_flops_per_pixel=self.backend_flops_per_pixel,
                    ecn_flops_per_pixel=self.ecn_flops_per_pixel,
                    flops=self.flops, scales=scales)

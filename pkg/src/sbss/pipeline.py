"""Coarse-to-fine stacking inference, plus single- and multi-scale baselines."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backend import PatchKey
from .ecm import FusionMode, correct
from .grid import (argmax_labels, confidence_map, crop, make_patch_grid, pad_to, paste,
                   resize_image, resize_probmap, scaled_dims)
from .scheduler import BudgetLedger, ScaleSchedule, ms_vote, select_patches


class ConfigError(ValueError):
    pass


class BackendError(RuntimeError):
    """A backend call failed; the message names the image, scale and patch."""


@dataclass
class RunConfig:
    schedule: ScaleSchedule
    backend: object
    mode: FusionMode = FusionMode.ECN_ACT
    weights: list = None
    workers: int = 1

    def __post_init__(self):
        try:
            self.mode = FusionMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode: unknown fusion mode {self.mode!r}") from None
        if self.workers < 1:
            raise ConfigError(f"workers: must be >= 1, got {self.workers}")
        if self.mode.needs_weights:
            n = self.schedule.transitions
            if self.weights is None or len(self.weights) != n:
                got = 0 if self.weights is None else len(self.weights)
                raise ConfigError(f"weights: mode {self.mode.value} needs {n} weight sets "
                                  f"(one per scale transition), got {got}")

    @property
    def ecn_flops_per_pixel(self) -> float:
        if not self.mode.needs_weights or not self.weights:
            return 0.0
        return float(self.weights[0].flops_per_pixel())


@dataclass
class RunResult:
    probs: np.ndarray
    labels: np.ndarray
    ledger: BudgetLedger
    diagnostics: dict = field(default_factory=dict)


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _call_backend(backend, patch, scale, key):
    try:
        return backend.segment(patch, scale, key)
    except Exception as exc:
        raise BackendError(f"backend failed on image {key.image_id!r} at scale {scale} "
                           f"rect {key.rect.as_list()}: {exc}") from exc


def tiled_segment(backend, image, scale, patch, image_id="image", ledger=None, workers=1):
    """Segment ``image`` resized to ``scale`` patch by patch; map at the scaled size."""
    h, w = scaled_dims(*image.shape[:2], scale)
    grid = make_patch_grid(h, w, *patch)
    x = pad_to(resize_image(image, h, w), grid.padded_h, grid.padded_w)

    def work(rect):
        return _call_backend(backend, crop(x, rect), scale, PatchKey(image_id, rect))

    maps = _pmap(work, list(grid.rects), workers)
    out = np.empty((maps[0].shape[0], grid.padded_h, grid.padded_w), dtype=np.float32)
    for rect, m in zip(grid.rects, maps):
        paste(out, m, rect)
    if ledger is not None:
        ledger.record(scale, len(grid) * grid.patch_h * grid.patch_w,
                      slack=grid.padded_h * grid.padded_w - h * w, patches=len(grid))
    return np.ascontiguousarray(out[:, :h, :w])


def refine(cfg: RunConfig, image: np.ndarray, image_id: str = "image", upto: int = None,
           ledger: BudgetLedger = None, trace: list = None, transitions: list = None):
    """The refined map at the geometry of ``schedule.scales[upto]`` (default: last).

    Only the transitions up to ``upto`` run.  If ``trace`` is a list, each
    transition appends ``(resized, corrected, rects)`` with both maps at the
    padded geometry of the finer scale; ``transitions`` collects diagnostics.
    """
    sched = cfg.schedule
    upto = sched.transitions if upto is None else upto
    if not 0 <= upto <= sched.transitions:
        raise ValueError(f"upto: {upto} outside [0, {sched.transitions}]")
    H, W = image.shape[:2]
    use_ecn = cfg.mode.needs_weights
    y = tiled_segment(cfg.backend, image, sched.scales[0], sched.patch, image_id, ledger,
                      cfg.workers)
    for i in range(upto):
        scale = sched.scales[i + 1]
        h, w = scaled_dims(H, W, scale)
        resized = resize_probmap(y, h, w)
        grid = make_patch_grid(h, w, *sched.patch)
        rects = select_patches(sched, i + 1, confidence_map(resized), grid)
        x = pad_to(resize_image(image, h, w), grid.padded_h, grid.padded_w)
        base = np.array(pad_to(resized, grid.padded_h, grid.padded_w), copy=True)
        weights = cfg.weights[i] if use_ecn else None

        def work(rect, weights=weights, x=x, base=base, scale=scale):
            upper = _call_backend(cfg.backend, crop(x, rect), scale, PatchKey(image_id, rect))
            return correct(cfg.mode, weights, crop(base, rect), upper, return_mask=True)

        results = _pmap(work, rects, cfg.workers)
        out = base.copy()
        replaced = []
        for rect, (fused, mask) in zip(rects, results):
            paste(out, fused, rect)
            replaced.append(1.0 if mask is None else float(mask.mean()))
        if trace is not None:
            trace.append((base, out, list(rects)))
        area = grid.patch_h * grid.patch_w
        slack = sum(area - grid.host_part(r).area for r in rects)
        if ledger is not None:
            ledger.record(scale, len(rects) * area, len(rects) * area if use_ecn else 0,
                          slack=slack, patches=len(rects))
        if transitions is not None:
            transitions.append(dict(
                from_scale=sched.scales[i], to_scale=scale, mode=cfg.mode.value,
                patches_total=len(grid), patches_selected=len(rects),
                selected=[r.as_list() for r in rects],
                backend_calls=len(rects),
                ecn_calls=len(rects) if use_ecn else 0,
                act_calls=len(rects) if cfg.mode is not FusionMode.ECN_ONLY else 0,
                replaced_fraction=replaced))
        y = np.ascontiguousarray(out[:, :h, :w])
    return y


def run_sbss(cfg: RunConfig, image: np.ndarray, image_id: str = "image",
             trace: list = None) -> RunResult:
    """Refine the smallest-scale map through every larger scale of the schedule."""
    sched = cfg.schedule
    H, W = image.shape[:2]
    ledger = BudgetLedger(H * W, cfg.backend.flops_per_pixel, cfg.ecn_flops_per_pixel)
    transitions = []
    y = refine(cfg, image, image_id, ledger=ledger, trace=trace, transitions=transitions)
    probs = resize_probmap(y, H, W)
    diag = dict(image_id=image_id, scheme=sched.scheme, scales=list(sched.scales),
                transitions=transitions)
    return RunResult(probs, argmax_labels(probs), ledger, diag)


def run_ss(backend, image, patch, image_id="image", workers=1) -> RunResult:
    """Single-scale test at the original resolution."""
    return run_ms(backend, image, (1.0,), patch, image_id, workers)


def run_ms(backend, image, scales, patch, image_id="image", workers=1) -> RunResult:
    """Multi-scale test: full tiled inference per scale, then average voting."""
    if not scales:
        raise ConfigError("scales: at least one scale is required")
    H, W = image.shape[:2]
    ledger = BudgetLedger(H * W, backend.flops_per_pixel, 0.0)
    maps = [tiled_segment(backend, image, s, patch, image_id, ledger, workers) for s in scales]
    probs = maps[0] if len(maps) == 1 and maps[0].shape[1:] == (H, W) else ms_vote(maps, H, W)
    diag = dict(image_id=image_id, scheme="baseline_ms" if len(scales) > 1 else "baseline_ss",
                scales=[float(s) for s in scales], transitions=[])
    return RunResult(probs, argmax_labels(probs), ledger, diag)

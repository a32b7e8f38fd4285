"""Supervised training of the correction network, one network per scale transition."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels as K
from .backend import PatchKey
from .ecm import EcnWeights, FusionMode, _dw, forward, stack_inputs
from .grid import IGNORE, crop, make_patch_grid, pad_to, resize_image, resize_labels, \
    resize_probmap, scaled_dims
from .pipeline import RunConfig, _call_backend, refine, tiled_segment
from .scheduler import ScaleSchedule

log = logging.getLogger(__name__)


@dataclass
class TrainSample:
    lower: np.ndarray   # coarse map resized to the fine geometry, (C, H, W)
    upper: np.ndarray   # fine map, (C, H, W)
    target: np.ndarray  # labels at the fine geometry, IGNORE where unlabeled

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError(f"lower {self.lower.shape} and upper {self.upper.shape} differ")
        if self.target.shape != self.lower.shape[1:]:
            raise ValueError(f"target {self.target.shape} does not match maps {self.lower.shape}")
        bad = (self.target != IGNORE) & (self.target >= self.lower.shape[0])
        if bad.any():
            raise ValueError("target holds class indices beyond the map's channels")


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    power: float = 0.9
    seed: int = 0
    crop: int = 0          # random square crop size; 0 keeps whole samples
    hflip: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations: must be >= 1, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size: must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr: must be >= 0, got {self.lr}")
        if self.crop < 0:
            raise ValueError(f"crop: must be >= 0, got {self.crop}")


def batch_arrays(samples):
    """Stack samples into the channels-last network input and the target array."""
    x = np.stack([stack_inputs(s.lower, s.upper) for s in samples])
    t = np.stack([s.target for s in samples])
    return x, t


def loss_and_grads(weights: EcnWeights, batch):
    """Mean cross-entropy over labeled pixels and its gradient for every parameter.

    ``batch`` is a list of ``TrainSample`` or an ``(x, target)`` pair as made by
    ``batch_arrays``.  Arithmetic runs in the dtype of ``weights``.
    """
    x, target = batch_arrays(batch) if isinstance(batch, list) else batch
    valid = target != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("batch has no labeled pixels")
    p = weights.params
    dt = weights.dtype
    probs, cache = forward(weights, x, keep=True)
    C = weights.classes
    t = np.where(valid, target, 0).astype(np.intp)

    picked = np.take_along_axis(probs, t[..., None], axis=-1)[..., 0]
    tiny = np.finfo(dt).tiny
    loss = float(-np.log(np.maximum(picked[valid], tiny)).sum(dtype=np.float64) / n_valid)

    dz = probs.copy()
    np.put_along_axis(dz, t[..., None], picked[..., None] - 1.0, axis=-1)
    dz[~valid] = 0.0
    dz /= n_valid

    grads = {}
    h = cache["h"]
    width = weights.width
    dz2 = dz.reshape(-1, C)
    grads["head.w"] = (dz2.T @ h.reshape(-1, width)).reshape(p["head.w"].shape)
    grads["head.b"] = dz2.sum(axis=0)
    dh = K.matmul(dz, p["head.w"].reshape(C, width))

    block_grads = []
    for i in reversed(range(weights.blocks)):
        pre = f"block{i}."
        hp, d, e, te, g = cache["blocks"][i]
        hidden = e.shape[-1]
        dh2 = dh.reshape(-1, width)
        g_proj_w = (dh2.T @ g.reshape(-1, hidden)).reshape(p[pre + "project.w"].shape)
        g_proj_b = dh2.sum(axis=0)
        de = K.matmul(dh, p[pre + "project.w"].reshape(width, hidden)) * K.gelu_grad(e, te)
        de2 = de.reshape(-1, hidden)
        g_exp_w = (de2.T @ d.reshape(-1, width)).reshape(p[pre + "expand.w"].shape)
        g_exp_b = de2.sum(axis=0)
        dd = K.matmul(de, p[pre + "expand.w"].reshape(hidden, width))
        dx, dkern = K.depthwise_grads(hp, _dw(p[pre + "dw.w"]), dd)
        block_grads.append({
            pre + "dw.w": dkern.transpose(2, 0, 1)[:, None],
            pre + "dw.b": dd.reshape(-1, width).sum(axis=0),
            pre + "expand.w": g_exp_w, pre + "expand.b": g_exp_b,
            pre + "project.w": g_proj_w, pre + "project.b": g_proj_b,
        })
        dh = dh + dx

    ds = dh * K.gelu_grad(cache["s"], cache["ts"])
    cols = cache["cols"]
    ds2 = ds.reshape(-1, width)
    k = weights.stem_kernel
    gw = cols.reshape(-1, cols.shape[-1]).T @ ds2
    grads["stem.w"] = gw.reshape(k, k, 2 * C, width).transpose(3, 2, 0, 1)
    grads["stem.b"] = ds2.sum(axis=0)
    for bg in reversed(block_grads):
        grads.update(bg)
    ordered = {name: np.ascontiguousarray(grads[name], dtype=dt) for name in weights.names()}
    return loss, ordered


def poly_lr(cfg: TrainConfig, step: int) -> float:
    return cfg.lr * max(0.0, 1.0 - step / cfg.iterations) ** cfg.power


def sgd_step(params: dict, grads: dict, velocity: dict, step: int, cfg: TrainConfig):
    """One momentum-SGD update with coupled weight decay and a poly learning rate.

    ``v <- momentum * v + g + weight_decay * w``;  ``w <- w - lr(step) * v``.
    Returns new ``(params, velocity)`` dicts; the inputs are left untouched.
    """
    lr = poly_lr(cfg, step)
    new_p, new_v = {}, {}
    for name, w in params.items():
        v = cfg.momentum * velocity.get(name, 0.0) + grads[name] + cfg.weight_decay * w
        new_v[name] = np.asarray(v, dtype=w.dtype)
        new_p[name] = np.asarray(w - lr * new_v[name], dtype=w.dtype)
    return new_p, new_v


def _sample_batch(samples, idx, cfg, rng):
    xs, ts = [], []
    for j in idx:
        s = samples[j]
        x = stack_inputs(s.lower, s.upper)
        t = s.target
        h, w = t.shape
        if cfg.crop and (cfg.crop < h or cfg.crop < w):
            ch, cw = min(cfg.crop, h), min(cfg.crop, w)
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            x, t = x[y0:y0 + ch, x0:x0 + cw], t[y0:y0 + ch, x0:x0 + cw]
        if cfg.hflip and rng.random() < 0.5:
            x, t = x[:, ::-1], t[:, ::-1]
        xs.append(x)
        ts.append(t)
    return np.ascontiguousarray(np.stack(xs)), np.ascontiguousarray(np.stack(ts))


def dataset_loss(weights: EcnWeights, samples, chunk: int = 16) -> float:
    """Mean per-pixel cross-entropy over every labeled pixel of ``samples``."""
    total, count = 0.0, 0
    for i in range(0, len(samples), chunk):
        x, t = batch_arrays(samples[i:i + chunk])
        probs, _ = forward(weights, x)
        valid = t != IGNORE
        tt = np.where(valid, t, 0).astype(np.intp)
        picked = np.take_along_axis(probs, tt[..., None], axis=-1)[..., 0][valid]
        total += float(-np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)).sum(dtype=np.float64))
        count += int(valid.sum())
    return total / max(count, 1)


def train(cfg: TrainConfig, samples, weights: EcnWeights = None, log_fn=None) -> EcnWeights:
    """Train one network on ``samples``; deterministic given ``cfg.seed``.

    ``log_fn`` receives ``(iteration, lr, loss)`` every ``cfg.log_every`` steps
    and after the last one.
    """
    if not samples:
        raise ValueError("no training samples")
    C = samples[0].lower.shape[0]
    if weights is None:
        weights = EcnWeights.init(C, seed=cfg.seed)
    elif weights.classes != C:
        raise ValueError(f"weights are for {weights.classes} classes, samples have {C}")
    rng = np.random.default_rng([cfg.seed, 1])
    params = {k: v.copy() for k, v in weights.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    order, pos = rng.permutation(len(samples)), 0
    arch = weights.arch
    for step in range(cfg.iterations):
        idx = []
        while len(idx) < cfg.batch_size:
            if pos == len(order):
                order, pos = rng.permutation(len(samples)), 0
            idx.append(order[pos])
            pos += 1
        x, t = _sample_batch(samples, idx, cfg, rng)
        current = EcnWeights(C, params, **arch)
        try:
            loss, grads = loss_and_grads(current, (x, t))
        except ValueError:
            # fully unlabeled crop: nothing to learn from this batch
            continue
        params, velocity = sgd_step(params, grads, velocity, step, cfg)
        if log_fn is not None and (step % cfg.log_every == 0 or step == cfg.iterations - 1):
            log_fn(step, poly_lr(cfg, step), loss)
    return EcnWeights(C, params, **arch)


def _truncated(schedule, n_scales):
    return ScaleSchedule(schedule.scales[:n_scales], schedule.fractions[:n_scales],
                         schedule.patch, schedule.scheme)


def build_training_set(backend, scenes, schedule, transition_index: int, workers: int = 1,
                       weights=None, mode=FusionMode.ECN_ACT):
    """Training pairs for the transition ``i -> i + 1`` of ``schedule``.

    The coarse input is the map at scale ``i`` resized to scale ``i + 1`` and
    cut at each patch of that scale.  Without ``weights`` it is the backend's
    own tiled map at scale ``i``.  With ``weights`` (one set for each earlier
    transition) it is the map refined by the pipeline up to scale ``i`` in
    ``mode``, i.e. exactly what the network receives at inference time.
    Padding pixels of a patch are labeled IGNORE.
    """
    n = schedule.transitions
    if not 0 <= transition_index < n:
        raise ValueError(f"transition index {transition_index} out of range [0, {n})")
    chained = weights is not None and transition_index > 0
    if chained:
        if len(weights) < transition_index:
            raise ValueError(f"weights: need {transition_index} earlier weight sets, "
                             f"got {len(weights)}")
        run_cfg = RunConfig(_truncated(schedule, transition_index + 1), backend, mode,
                            list(weights[:transition_index]), workers)
    s_lo = schedule.scales[transition_index]
    s_hi = schedule.scales[transition_index + 1]
    samples = []
    for image_id, image, gt in scenes:
        H, W = image.shape[:2]
        if chained:
            y_lo = refine(run_cfg, image, image_id)
        else:
            y_lo = tiled_segment(backend, image, s_lo, schedule.patch, image_id, workers=workers)
        h, w = scaled_dims(H, W, s_hi)
        grid = make_patch_grid(h, w, *schedule.patch)
        lower = pad_to(resize_probmap(y_lo, h, w), grid.padded_h, grid.padded_w)
        x = pad_to(resize_image(image, h, w), grid.padded_h, grid.padded_w)
        target = np.full((grid.padded_h, grid.padded_w), IGNORE, dtype=np.uint8)
        target[:h, :w] = resize_labels(gt, h, w)
        for rect in grid.rects:
            upper = _call_backend(backend, crop(x, rect), s_hi, PatchKey(image_id, rect))
            samples.append(TrainSample(crop(lower, rect), upper, crop(target, rect)))
    return samples


def train_schedule(cfg: TrainConfig, backend, scenes, schedule, mode=FusionMode.ECN_ACT,
                   chained: bool = True, workers: int = 1, log_fn=None):
    """One network per transition, trained in order.

    With ``chained`` set, each network learns from maps refined by the networks
    already trained (see ``build_training_set``).  Transition ``i`` trains with
    seed ``cfg.seed + i``.  ``log_fn`` receives ``(transition, iteration, lr, loss)``.
    """
    weights = []
    for i in range(schedule.transitions):
        samples = build_training_set(backend, scenes, schedule, i, workers,
                                     weights if chained else None, mode)
        cb = None if log_fn is None else (lambda it, lr, loss, i=i: log_fn(i, it, lr, loss))
        tcfg = replace(cfg, seed=cfg.seed + i)
        log.info("transition %d: %d samples", i, len(samples))
        weights.append(train(tcfg, samples, log_fn=cb))
    return weights

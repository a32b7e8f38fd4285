"""Error correction module: the correction network and confidence-threshold fusion.

The network maps the concatenation of a coarse map (already resized to the
finer geometry) and a fine map to an initial corrected map::

    [lower | upper] (2C) -> 3x3 conv + GELU (width)
                         -> residual block x2:
                              7x7 depthwise -> 1x1 expand (4x) -> GELU -> 1x1 project, + skip
                         -> 1x1 conv (C) -> softmax

Every convolution is stride 1 with zero 'same' padding, so resolution is kept.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .grid import confidence_map

EXPANSION = 4


class FusionMode(str, enum.Enum):
    ACT_ONLY = "act_only"
    ECN_ONLY = "ecn_only"
    ECN_ACT = "ecn_act"

    @property
    def needs_weights(self) -> bool:
        return self is not FusionMode.ACT_ONLY


@dataclass
class EcnWeights:
    """Parameters of one correction network (one per scale transition).

    ``params`` is keyed by name in serialization order; kernels use the
    ``(out, in, k, k)`` layout (depthwise kernels have ``in == 1``).
    """

    classes: int
    params: dict = field(repr=False)
    width: int = 96
    blocks: int = 2
    stem_kernel: int = 3
    dw_kernel: int = 7

    def __post_init__(self):
        shapes = self.param_shapes(self.classes, self.width, self.blocks,
                                   self.stem_kernel, self.dw_kernel)
        if list(self.params) != list(shapes):
            raise ValueError(f"parameter names {list(self.params)} != expected {list(shapes)}")
        for name, shape in shapes.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")

    @staticmethod
    def param_shapes(classes, width=96, blocks=2, stem_kernel=3, dw_kernel=7):
        if classes < 2:
            raise ValueError(f"need at least 2 classes, got {classes}")
        if width < 1 or blocks < 0:
            raise ValueError(f"bad width/blocks {width}/{blocks}")
        for k in (stem_kernel, dw_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        hidden = EXPANSION * width
        shapes = {"stem.w": (width, 2 * classes, stem_kernel, stem_kernel),
                  "stem.b": (width,)}
        for i in range(blocks):
            shapes.update({
                f"block{i}.dw.w": (width, 1, dw_kernel, dw_kernel),
                f"block{i}.dw.b": (width,),
                f"block{i}.expand.w": (hidden, width, 1, 1),
                f"block{i}.expand.b": (hidden,),
                f"block{i}.project.w": (width, hidden, 1, 1),
                f"block{i}.project.b": (width,),
            })
        shapes.update({"head.w": (classes, width, 1, 1), "head.b": (classes,)})
        return shapes

    @classmethod
    def zeros(cls, classes, dtype=np.float32, **arch):
        shapes = cls.param_shapes(classes, **arch)
        return cls(classes, {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}, **arch)

    @classmethod
    def init(cls, classes, seed=0, **arch):
        """Kaiming-uniform (fan-in) kernels, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.param_shapes(classes, **arch).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        return cls(classes, params, **arch)

    def names(self):
        return list(self.params)

    @property
    def arch(self) -> dict:
        return dict(width=self.width, blocks=self.blocks,
                    stem_kernel=self.stem_kernel, dw_kernel=self.dw_kernel)

    @property
    def dtype(self):
        return self.params["stem.w"].dtype

    def astype(self, dtype) -> "EcnWeights":
        return EcnWeights(self.classes, {k: v.astype(dtype) for k, v in self.params.items()},
                          **self.arch)

    def copy(self) -> "EcnWeights":
        return self.astype(self.dtype)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flops_per_pixel(self) -> int:
        """Multiply-adds counted as 2 flops, per output pixel, for one forward pass."""
        hidden = EXPANSION * self.width
        stem = 2 * self.stem_kernel ** 2 * 2 * self.classes * self.width
        block = (2 * self.dw_kernel ** 2 * self.width
                 + 2 * self.width * hidden + 2 * hidden * self.width)
        head = 2 * self.width * self.classes
        return stem + self.blocks * block + head


def _mat(w):
    # 1x1 kernel (out, in, 1, 1) -> (in, out)
    return w.reshape(w.shape[0], w.shape[1]).T


def _dw(w):
    # depthwise kernel (C, 1, k, k) -> (k, k, C)
    return w[:, 0].transpose(1, 2, 0)


def forward(weights: EcnWeights, x: np.ndarray, keep: bool = False):
    """Run the network on a channels-last batch ``x`` of shape (N, H, W, 2C).

    Returns ``(probs, cache)`` with ``probs`` of shape (N, H, W, C); ``cache`` is
    ``None`` unless ``keep`` is set, in which case it holds what backprop needs.
    """
    p = weights.params
    dt = weights.dtype
    x = x.astype(dt, copy=False)
    cols = K.im2col(x, weights.stem_kernel)
    s = K.matmul(cols, K.conv_matrix(p["stem.w"])) + p["stem.b"]
    h, ts = K.gelu(s)
    blocks = []
    for i in range(weights.blocks):
        pre = f"block{i}."
        d, hp = K.depthwise(h, _dw(p[pre + "dw.w"]))
        d += p[pre + "dw.b"]
        e = K.matmul(d, _mat(p[pre + "expand.w"])) + p[pre + "expand.b"]
        g, te = K.gelu(e)
        h_next = h + (K.matmul(g, _mat(p[pre + "project.w"])) + p[pre + "project.b"])
        if keep:
            blocks.append((hp, d, e, te, g))
        h = h_next
    z = K.matmul(h, _mat(p["head.w"])) + p["head.b"]
    probs = K.softmax(z)
    cache = dict(cols=cols, s=s, ts=ts, blocks=blocks, h=h) if keep else None
    return probs, cache


def _check_pair(lower, upper):
    if lower.ndim != 3 or upper.ndim != 3:
        raise ValueError("maps must have shape (C, H, W)")
    if lower.shape[0] != upper.shape[0]:
        raise ValueError(f"channel mismatch: lower has {lower.shape[0]}, upper {upper.shape[0]}")
    if lower.shape != upper.shape:
        raise ValueError(f"geometry mismatch: {lower.shape} vs {upper.shape}")


def stack_inputs(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """(C,H,W) pair -> (H, W, 2C) channels-last network input, lower first."""
    return np.concatenate([lower, upper], axis=0).transpose(1, 2, 0)


def ecn_forward(weights: EcnWeights, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Initial corrected map from the resized coarse map and the fine map."""
    _check_pair(lower, upper)
    if weights.classes != lower.shape[0]:
        raise ValueError(f"weights are for {weights.classes} classes, maps have {lower.shape[0]}")
    probs, _ = forward(weights, stack_inputs(lower, upper)[None])
    # output dtype follows the weights (float64 only in verification mode)
    return np.ascontiguousarray(probs[0].transpose(2, 0, 1))


def ad_map(conf_lower: np.ndarray, conf_upper: np.ndarray) -> np.ndarray:
    if conf_lower.shape != conf_upper.shape:
        raise ValueError(f"geometry mismatch: {conf_lower.shape} vs {conf_upper.shape}")
    return (1.0 - conf_lower) * conf_upper


def act_threshold(ad: np.ndarray) -> float:
    """Upper median: element ``N // 2`` of the ascending order."""
    flat = np.ravel(ad)
    if flat.size == 0:
        raise ValueError("empty map has no median")
    k = flat.size // 2
    return float(np.partition(flat, k)[k])


def act_fuse(base: np.ndarray, candidate: np.ndarray):
    """Replace base pixels whose AD value is strictly above the median AD.

    Returns the fused map and the boolean replacement mask.
    """
    _check_pair(base, candidate)
    ad = ad_map(confidence_map(base), confidence_map(candidate))
    mask = ad > act_threshold(ad)
    out = np.array(base, dtype=np.float32, copy=True)
    out[:, mask] = candidate[:, mask]
    return out, mask


def correct(mode, weights, lower, upper, return_mask=False):
    """Corrected map of one selected area under the given fusion mode."""
    mode = FusionMode(mode)
    if mode.needs_weights and weights is None:
        raise ValueError(f"mode {mode.value} needs network weights")
    mask = None
    if mode is FusionMode.ACT_ONLY:
        out, mask = act_fuse(lower, upper)
    elif mode is FusionMode.ECN_ONLY:
        out = ecn_forward(weights, lower, upper)
    else:
        out, mask = act_fuse(lower, ecn_forward(weights, lower, upper))
    return (out, mask) if return_mask else out

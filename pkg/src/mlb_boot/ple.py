"""Pseudo-label enhancement: invertible grid augmentations, ensembled labels and
the pairwise augmentation-consistency loss."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .model import forward as model_forward, pseudo_label
from .tensor import ShapeError, Tensor

KINDS = ("identity", "flip-h", "flip-v", "rot90", "rot270", "zoom-in", "zoom-out")


def _pad(a, k, fill):
    return np.pad(a, k, constant_values=fill)


def _crop(a, k):
    return a[k:a.shape[0] - k, k:a.shape[1] - k]


# forward and inverse geometric maps on a 2D grid, parameterised by (array, k, fill)
_GEOMETRY: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda a, k, f: a, lambda a, k, f: a),
    "flip-h": (lambda a, k, f: a[:, ::-1], lambda a, k, f: a[:, ::-1]),
    "flip-v": (lambda a, k, f: a[::-1, :], lambda a, k, f: a[::-1, :]),
    "rot90": (lambda a, k, f: np.rot90(a, 1), lambda a, k, f: np.rot90(a, -1)),
    "rot270": (lambda a, k, f: np.rot90(a, -1), lambda a, k, f: np.rot90(a, 1)),
    "zoom-out": (_pad, lambda a, k, f: _crop(a, k)),
    "zoom-in": (lambda a, k, f: _crop(a, k), _pad),
}


@dataclass(frozen=True)
class AugmentationSpec:
    """An exactly invertible grid transform.

    ``zoom-out:k`` pads k pixels on every side (inverse crops them);
    ``zoom-in:k`` crops k pixels from every side (inverse zero-pads).
    """

    kind: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind.startswith("zoom") and self.k < 1:
            raise ValueError(f"{self.kind} needs a positive pixel count, got {self.k}")

    @classmethod
    def parse(cls, text: str) -> "AugmentationSpec":
        kind, _, arg = text.strip().partition(":")
        if kind.startswith("zoom"):
            if not arg.strip().isdigit():
                raise ValueError(f"bad augmentation spec {text!r}; expected e.g. {kind}:2")
            return cls(kind, int(arg))
        if arg:
            raise ValueError(f"augmentation {kind!r} takes no argument (got {text!r})")
        return cls(kind)

    def __str__(self):
        return f"{self.kind}:{self.k}" if self.kind.startswith("zoom") else self.kind

    def out_shape(self, H: int, W: int) -> tuple[int, int]:
        return self.forward_index(H, W).shape

    def forward_index(self, H: int, W: int) -> np.ndarray:
        """For each augmented-grid pixel, its flat source index on the original grid (-1 = fill)."""
        return _index_maps(self, H, W)[0]

    def inverse_index(self, H: int, W: int) -> np.ndarray:
        """For each original-grid pixel, its flat source index on the augmented grid (-1 = fill)."""
        return _index_maps(self, H, W)[1]

    def valid_mask(self, H: int, W: int) -> np.ndarray:
        """Original-grid pixels where invert(apply(x)) == x exactly."""
        return _index_maps(self, H, W)[2]

    def apply(self, t):
        """Transform the last two axes of an array or taped tensor."""
        H, W = np.shape(t.data if isinstance(t, Tensor) else t)[-2:]
        return _remap(t, self.forward_index(H, W))

    def invert(self, t, H: int, W: int):
        """Map an augmented-grid field back onto the original ``H x W`` grid."""
        shp = np.shape(t.data if isinstance(t, Tensor) else t)[-2:]
        if tuple(shp) != self.out_shape(H, W):
            raise ShapeError("invert", f"{self}: field {tuple(shp)} is not the augmented grid of {H}x{W}")
        return _remap(t, self.inverse_index(H, W))


def _remap(t, index):
    if isinstance(t, Tensor):
        return T.remap(t, index)
    return T.remap(np.asarray(t, dtype=np.float64), index).numpy()


@lru_cache(maxsize=256)
def _index_maps(spec: AugmentationSpec, H: int, W: int):
    fwd, inv = _GEOMETRY[spec.kind]
    if spec.kind == "zoom-in" and (H <= 2 * spec.k or W <= 2 * spec.k):
        raise ShapeError("augment", f"{spec}: grid {H}x{W} too small to crop {spec.k} per side")
    grid = np.arange(H * W).reshape(H, W)
    f_idx = np.ascontiguousarray(fwd(grid, spec.k, -1))
    aug = np.arange(f_idx.size).reshape(f_idx.shape)
    i_idx = np.ascontiguousarray(inv(aug, spec.k, -1))
    if i_idx.shape != (H, W):
        raise ShapeError("augment", f"{spec}: inverse does not return to {H}x{W}")
    flat_f = f_idx.ravel()
    ok = i_idx >= 0
    roundtrip = np.full(H * W, -1)
    roundtrip[ok.ravel()] = flat_f[i_idx[ok]]
    valid = (roundtrip == np.arange(H * W)).reshape(H, W)
    for a in (f_idx, i_idx, valid):
        a.flags.writeable = False
    return f_idx, i_idx, valid


def parse_specs(specs) -> tuple[AugmentationSpec, ...]:
    if isinstance(specs, str):
        specs = [s for s in specs.split(",") if s.strip()]
    return tuple(s if isinstance(s, AugmentationSpec) else AugmentationSpec.parse(s) for s in specs)


def _composed_index(q: AugmentationSpec, v: AugmentationSpec, H: int, W: int) -> np.ndarray:
    # grid-q pixel -> grid-v pixel for tau_q(tau_v^{-1}(.)), -1 where any stage is invalid
    f_q = q.forward_index(H, W).ravel()
    inv_v = v.inverse_index(H, W).ravel()
    valid_v = v.valid_mask(H, W).ravel()
    out = np.full(f_q.size, -1)
    ok = f_q >= 0
    src = f_q[ok]
    out[ok] = np.where(valid_v[src], inv_v[src], -1)
    return out.reshape(q.out_shape(H, W))


def ensemble_pseudo_label(params: Mapping, x, specs, forward: Callable = model_forward,
                          logits=None) -> np.ndarray:
    """Argmax of the mean class-probability map over the original input and its
    inverse-transformed augmentations; each pixel averages only its valid views.

    ``logits`` may carry an already computed forward pass of ``x``.
    """
    specs = parse_specs(specs)
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    if logits is None:
        logits = forward(params, x)
    probs = T.softmax(T.stop_gradient(logits), axis=-3).numpy()
    total = probs.copy()
    count = np.ones((H, W))
    # canonical order keeps the floating-point sum independent of list order
    for spec in sorted(specs, key=lambda s: (s.kind, s.k)):
        p = T.softmax(forward(params, spec.apply(x)), axis=-3).numpy()
        valid = spec.valid_mask(H, W)
        total += spec.invert(p, H, W) * valid
        count += valid
    return pseudo_label(total / count)


def aug_consistency_loss(params: Mapping, x, specs, forward: Callable = model_forward,
                         logits=None) -> Tensor:
    """Mean squared disagreement between class-probability fields of every
    unordered pair among the original input (member 0) and the Q augmented
    views, compared on the first member's grid and scaled by 2/((Q+1)Q)/(HW).

    Averaged over the batch.  Raises for Q = 0.  ``logits`` may carry the
    (taped) forward pass of the unaugmented input.
    """
    specs = parse_specs(specs)
    Q = len(specs)
    if Q == 0:
        raise ValueError("augmentation consistency loss needs at least one augmentation")
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    members = (AugmentationSpec("identity"),) + specs
    outs = [T.softmax(logits if (i == 0 and logits is not None) else forward(params, m.apply(x)), axis=-3)
            for i, m in enumerate(members)]
    total = None
    for q, v in combinations(range(Q + 1), 2):
        idx = _composed_index(members[q], members[v], H, W)
        mask = (idx >= 0).astype(np.float64)
        diff = T.sub(outs[q], T.remap(outs[v], idx))
        term = T.tsum(T.mul(T.square(diff), mask))
        total = term if total is None else total + term
    batch = x.shape[0] if x.ndim == 4 else 1
    return total * (2.0 / ((Q + 1) * Q) / (H * W) / batch)

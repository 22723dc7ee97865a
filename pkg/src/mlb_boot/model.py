"""Small encoder-decoder segmentation network, pseudo labels and pixel losses."""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

NUM_CLASSES = 2

# name, in-channel multiple, out-channel multiple, kernel, stride
# (multiples of the base width F; "in" of 0 means the single image channel)
_LAYOUT = (
    ("enc1", 0, 1, 3, 1),
    ("enc2", 1, 1, 3, 1),
    ("down", 1, 2, 3, 2),
    ("mid1", 2, 2, 3, 1),
    ("mid2", 2, 2, 3, 1),
    ("dec1", 3, 1, 3, 1),
    ("dec2", 1, 1, 3, 1),
    ("head", 1, -1, 1, 1),
)


class ModelParams(dict):
    """Ordered mapping of parameter name to float64 array."""

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([np.ravel(v) for v in self.values()])

    def unflatten(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError("unflatten", f"vector has {vec.size} entries, params need {self.size}")
        out, at = ModelParams(), 0
        for name, v in self.items():
            n = np.size(v)
            out[name] = vec[at:at + n].reshape(np.shape(v)).copy()
            at += n
        return out

    @property
    def size(self) -> int:
        return int(sum(np.size(v) for v in self.values()))

    def copy(self) -> "ModelParams":
        return ModelParams((k, np.array(v, dtype=np.float64)) for k, v in self.items())

    def map(self, fn) -> "ModelParams":
        return ModelParams((k, fn(v)) for k, v in self.items())

    def zip_map(self, other: Mapping, fn) -> "ModelParams":
        if list(self) != list(other):
            raise ShapeError("params", f"layout mismatch: {list(self)} vs {list(other)}")
        return ModelParams((k, fn(v, other[k])) for k, v in self.items())


def layer_shapes(width: int = 8) -> list[tuple[str, tuple]]:
    shapes = []
    for name, cin, cout, k, _ in _LAYOUT:
        ci = 1 if cin == 0 else cin * width
        co = NUM_CLASSES if cout < 0 else cout * width
        shapes.append((f"{name}.w", (co, ci, k, k)))
        shapes.append((f"{name}.b", (co,)))
    return shapes


def init_params(width: int = 8, rng: Optional[np.random.Generator] = None, zero: bool = False) -> ModelParams:
    """He-normal kernels and zero biases (all zeros when ``zero``)."""
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    rng = np.random.default_rng(0) if rng is None else rng
    params = ModelParams()
    for name, shape in layer_shapes(width):
        if zero or name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def forward(params: Mapping, images) -> Tensor:
    """Logits ``[B,2,H,W]`` for images ``[B,1,H,W]`` (a single ``[1,H,W]`` image also works).

    ``params`` values may be arrays or taped tensors.
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError("model_forward", f"expected [B,1,H,W] or [1,H,W] images, got {np.shape(images)}")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError("model_forward", f"H and W must be even, got {H}x{W}")
    p = params

    def block(h, name, stride=1):
        return T.relu(T.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride))

    h = block(x, "enc1")
    skip = block(h, "enc2")
    d = block(skip, "down", stride=2)
    d = block(d, "mid1")
    d = block(d, "mid2")
    u = T.concat([T.upsample2x(d), skip], axis=1)
    u = block(u, "dec1")
    u = block(u, "dec2")
    logits = T.conv2d(u, p["head.w"], p["head.b"], padding=0)
    return T.reshape(logits, logits.shape[1:]) if single else logits


def predict(params: Mapping, images) -> np.ndarray:
    return pseudo_label(forward(params, images))


def pseudo_label(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lower class."""
    L = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    axis = 0 if L.ndim == 3 else 1
    return np.argmax(L, axis=axis).astype(np.uint8)


def one_hot(target: np.ndarray, ndim_logits: int) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= NUM_CLASSES):
        raise ValueError(f"label values must lie in [0, {NUM_CLASSES}), got max {target.max()}")
    axis = 0 if ndim_logits == 3 else 1
    return np.stack([(target == c) for c in range(NUM_CLASSES)], axis=axis).astype(np.float64)


def per_pixel_ce(logits, target) -> Tensor:
    """Cross-entropy map ``-log softmax(logits)[target]`` with the class axis removed."""
    L = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    target = np.asarray(target)
    axis = 0 if L.ndim == 3 else 1
    expect = L.shape[:axis] + L.shape[axis + 1:]
    if target.shape != expect:
        raise ShapeError("per_pixel_ce", f"target shape {target.shape} != logits pixel shape {expect}")
    oh = one_hot(target, L.ndim)
    return -T.tsum(T.mul(T.log_softmax(logits, axis=axis), oh), axis=axis)


def weighted_bootstrap_loss(loss_n, loss_p, w_n, w_p) -> Tensor:
    """Sum over samples and pixels of ``w_n*loss_n + w_p*loss_p``."""
    shapes = {np.shape(a.data if isinstance(a, Tensor) else a) for a in (loss_n, loss_p, w_n, w_p)}
    if len(shapes) != 1:
        raise ShapeError("weighted_bootstrap_loss", f"maps disagree in shape: {sorted(shapes)}")
    return T.tsum(T.mul(w_n, loss_n)) + T.tsum(T.mul(w_p, loss_p))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum*v + (g + weight_decay*theta)``; ``theta <- theta - lr*v``.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Optional[ModelParams] = None

    def step(self, params: ModelParams, grads: Mapping) -> ModelParams:
        g = params.zip_map(grads, lambda p, gr: gr + self.weight_decay * p if self.weight_decay else gr)
        if self.momentum:
            if self.velocity is None:
                self.velocity = g.copy()
            else:
                self.velocity = self.velocity.zip_map(g, lambda v, gr: self.momentum * v + gr)
            g = self.velocity
        return params.zip_map(g, lambda p, d: p - self.lr * d)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "velocity": None if self.velocity is None else self.velocity.copy()}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.velocity = None if state["velocity"] is None else ModelParams(state["velocity"]).copy()

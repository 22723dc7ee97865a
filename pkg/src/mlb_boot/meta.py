"""Meta-learned bootstrapping: virtual step, per-pixel weight maps from the clean
batch, clamp/normalise, and the weighted parameter update."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .model import (
    SGD,
    ModelParams,
    forward as model_forward,
    init_params,
    per_pixel_ce,
    pseudo_label,
    weighted_bootstrap_loss,
)
from .ple import aug_consistency_loss, ensemble_pseudo_label, parse_specs
from .teacher import TeacherState, ema_update, st_consistency_loss
from .tensor import GradTape


@dataclass
class HyperConfig:
    alpha: float = 0.005
    alpha_baseline: Optional[float] = None  # baseline learning rate; None means alpha
    beta: float = 1.0
    eps: float = 1e-12
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_baseline: int = 16
    batch_clean: int = 4
    batch_noisy: int = 4
    lambda_aug: float = 1.0
    lambda_st: float = 1.0
    ple_specs: tuple = ()
    gamma: float = 0.1
    mu: float = 0.0
    sigma: float = 1.0
    ema_decay: float = 0.99
    epochs_baseline: int = 30
    epochs_mlb: int = 100
    width: int = 8
    seed: int = 0

    def __post_init__(self):
        self.ple_specs = parse_specs(self.ple_specs)
        if self.alpha_baseline is not None and self.alpha_baseline <= 0:
            raise ValueError(f"alpha_baseline must be positive, got {self.alpha_baseline}")
        if self.alpha <= 0 or self.beta <= 0 or self.eps <= 0:
            raise ValueError(f"alpha, beta, eps must be positive (got {self.alpha}, {self.beta}, {self.eps})")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if min(self.batch_baseline, self.batch_clean, self.batch_noisy) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.gamma < 0 or self.sigma < 0:
            raise ValueError("gamma and sigma must be non-negative")

    @property
    def baseline_lr(self) -> float:
        return self.alpha if self.alpha_baseline is None else self.alpha_baseline

    @property
    def Q(self) -> int:
        return len(self.ple_specs)


def mean_ce(params: Mapping, images, masks, forward: Callable = model_forward) -> T.Tensor:
    return T.mean(per_pixel_ce(forward(params, images), masks))


def baseline_train(images: np.ndarray, masks: np.ndarray, cfg: HyperConfig, rng: np.random.Generator,
                   init: Optional[ModelParams] = None, history: Optional[list] = None,
                   on_epoch: Optional[Callable] = None) -> ModelParams:
    """Supervised training on clean data: mean pixel CE, SGD with momentum and weight decay.

    ``init`` defaults to a He initialisation drawn from ``rng``.  Per-step
    losses are appended to ``history`` when given; ``on_epoch(epoch, params)``
    is called after each epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("baseline_train: clean dataset is empty")
    params = init_params(cfg.width, rng) if init is None else ModelParams(init).copy()
    opt = SGD(cfg.baseline_lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.epochs_baseline):
        params, _ = train_epoch(params, opt, images, masks, cfg.batch_baseline, rng, history)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params


def train_epoch(params: ModelParams, opt: SGD, images, masks, batch: int, rng: np.random.Generator,
                history: Optional[list] = None) -> tuple[ModelParams, int]:
    """One shuffled pass of mean-CE SGD; returns the new params and the step count."""
    n = len(images)
    order = rng.permutation(n)
    steps = 0
    for start in range(0, n, batch):
        idx = order[start:start + batch]
        tape = GradTape()
        p = tape.params(params)
        loss = mean_ce(p, images[idx], masks[idx])
        params = opt.step(params, tape.gradient(loss, p))
        steps += 1
        if history is not None:
            history.append(loss.item())
    return params, steps


def init_labels(theta_c: Mapping, images: np.ndarray, batch: int = 16) -> np.ndarray:
    """Initial masks for unlabeled images: the clean-trained model's argmax."""
    images = np.asarray(images, dtype=np.float64)
    out = [pseudo_label(model_forward(theta_c, images[i:i + batch])) for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], np.uint8)


def clean_gradient(theta: Mapping, x_c, y_c, forward: Callable = model_forward) -> dict:
    """Gradient of the clean-batch mean pixel CE at ``theta``."""
    tape = GradTape()
    p = tape.params(theta)
    return tape.gradient(mean_ce(p, np.asarray(x_c, dtype=np.float64), y_c, forward), p)


def meta_weight_maps(theta: Mapping, x_n, y_n, y_p, x_c, y_c, cfg: HyperConfig,
                     forward: Callable = model_forward, method: str = "tangent"):
    """Raw weight maps ``(w_n, w_p)``, each shaped like ``y_n``.

    One gradient step of the clean-batch mean CE evaluated after the virtual
    update, taken w.r.t. pixel weights initialised at zero.  At zero weights
    the virtual parameters equal ``theta``, so every raw weight equals
    ``alpha * beta * <g_clean, grad pixel_loss>``.

    ``method="tangent"`` gets all pixel inner products from one forward-mode
    pass along ``g_clean``; ``method="reverse"`` backpropagates every pixel
    loss separately (slow, for cross-checking).
    """
    x_n = np.asarray(x_n, dtype=np.float64)
    if len(x_n) == 0 or len(x_c) == 0:
        raise ValueError("meta_weight_maps: empty clean or noisy batch")
    g_clean = clean_gradient(theta, x_c, y_c, forward)
    scale = cfg.alpha * cfg.beta

    if method == "tangent":
        tape = GradTape()
        p = tape.params(theta)
        logits = forward(p, x_n)
        loss_n, loss_p = per_pixel_ce(logits, y_n), per_pixel_ce(logits, y_p)
        return _tangent_weights(tape, p, loss_n, loss_p, g_clean, scale)
    if method == "reverse":
        flat_g = ModelParams(g_clean).flatten()
        maps = []
        for y in (y_n, y_p):
            raw = np.zeros(np.shape(y))
            for j in range(len(x_n)):
                for r, s in np.ndindex(*raw.shape[1:]):
                    tape = GradTape()
                    p = tape.params(theta)
                    ell = per_pixel_ce(forward(p, x_n[j:j + 1]), y[j:j + 1])
                    pick = np.zeros(ell.shape)
                    pick[0, r, s] = 1.0
                    g = tape.gradient(T.tsum(T.mul(ell, pick)), p)
                    raw[j, r, s] = scale * float(flat_g @ ModelParams(g).flatten())
            maps.append(raw)
        return tuple(maps)
    raise ValueError(f"unknown method {method!r}")


def _tangent_weights(tape, p, loss_n, loss_p, g_clean, scale):
    tan = T.forward_tangent(tape, p, g_clean)
    return scale * tan[loss_n], scale * tan[loss_p]


def clamp_normalize(raw_n, raw_p, eps: float = 1e-12):
    """Clamp negatives to zero, then scale each family by its batch sum (+eps)."""
    raw_n, raw_p = np.asarray(raw_n, dtype=np.float64), np.asarray(raw_p, dtype=np.float64)
    if raw_n.shape != raw_p.shape:
        raise T.ShapeError("clamp_normalize", f"{raw_n.shape} vs {raw_p.shape}")
    out = []
    for raw in (raw_n, raw_p):
        w = np.maximum(raw, 0.0)
        out.append(w / (w.sum() + eps))
    return tuple(out)


def fixed_weight_maps(shape) -> tuple[np.ndarray, np.ndarray]:
    """Uniform, equal weights for both label families (plain bootstrapping)."""
    w = np.full(shape, 1.0 / np.prod(shape))
    return w, w.copy()


@dataclass
class StepResult:
    params: ModelParams
    teacher: Optional[TeacherState]
    w_n: np.ndarray
    w_p: np.ndarray
    y_p: np.ndarray
    losses: dict = field(default_factory=dict)


def mlb_step(params: ModelParams, optimizer: SGD, x_n, y_n, x_c, y_c, cfg: HyperConfig,
             rng: np.random.Generator, teacher: Optional[TeacherState] = None,
             weighting: str = "meta", forward: Callable = model_forward,
             weights: Optional[tuple] = None) -> StepResult:
    """One training step on a noisy batch ``(x_n, y_n)`` guided by a clean batch.

    Pseudo labels are computed once from the current student (ensembled when
    PLE augmentations are configured).  ``weighting`` is ``"meta"`` for
    meta-learned maps or ``"fixed"`` for uniform ones; explicit ``weights``
    override both.  The teacher, if any, adds the consistency term and is
    EMA-updated after the parameter step.
    """
    x_n = np.asarray(x_n, dtype=np.float64)
    # one taped forward of the noisy batch serves pseudo labels, tangents and the update
    tape = GradTape()
    p = tape.params(params)
    logits = forward(p, x_n)
    if cfg.Q:
        y_p = ensemble_pseudo_label(params, x_n, cfg.ple_specs, forward, logits=logits)
    else:
        y_p = pseudo_label(logits)
    loss_n, loss_p = per_pixel_ce(logits, y_n), per_pixel_ce(logits, y_p)

    if weights is not None:
        w_n, w_p = (np.asarray(w, dtype=np.float64) for w in weights)
    elif weighting == "meta":
        g_clean = clean_gradient(params, x_c, y_c, forward)
        raw_n, raw_p = _tangent_weights(tape, p, loss_n, loss_p, g_clean, cfg.alpha * cfg.beta)
        w_n, w_p = clamp_normalize(raw_n, raw_p, cfg.eps)
    elif weighting == "fixed":
        w_n, w_p = fixed_weight_maps(np.shape(y_n))
    else:
        raise ValueError(f"unknown weighting {weighting!r}")

    loss = weighted_bootstrap_loss(loss_n, loss_p, w_n, w_p)
    losses = {"boot": loss.item()}
    if cfg.Q and cfg.lambda_aug:
        aug = aug_consistency_loss(p, x_n, cfg.ple_specs, forward, logits=logits)
        losses["aug"] = aug.item()
        loss = loss + cfg.lambda_aug * aug
    if teacher is not None and cfg.lambda_st:
        st = st_consistency_loss(p, teacher, x_n, cfg.gamma, cfg.mu, cfg.sigma, rng, forward)
        losses["st"] = st.item()
        loss = loss + cfg.lambda_st * st
    losses["total"] = loss.item()
    new_params = optimizer.step(params, tape.gradient(loss, p))
    if teacher is not None:
        teacher = ema_update(teacher, new_params)
    return StepResult(new_params, teacher, w_n, w_p, y_p, losses)

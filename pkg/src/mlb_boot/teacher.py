"""Mean-teacher branch: input perturbation, student/teacher consistency, EMA."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .model import ModelParams, forward as model_forward
from .tensor import Tensor


@dataclass
class TeacherState:
    params: ModelParams
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1), got {self.decay}")

    @classmethod
    def from_student(cls, student: Mapping, decay: float = 0.99) -> "TeacherState":
        return cls(ModelParams(student).copy(), decay)


def perturb_input(x, gamma: float, mu: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``x + gamma * N(mu, sigma)``, i.i.d. per pixel."""
    if gamma < 0 or sigma < 0:
        raise ValueError(f"gamma and sigma must be non-negative (got {gamma}, {sigma})")
    x = np.asarray(x, dtype=np.float64)
    return x + gamma * rng.normal(mu, sigma, size=x.shape)


def st_consistency_loss(student: Mapping, teacher: TeacherState, x, gamma: float, mu: float,
                        sigma: float, rng: np.random.Generator,
                        forward: Callable = model_forward) -> Tensor:
    """Pixel MSE between student and teacher class probabilities, the teacher
    seeing a perturbed copy of the input.  Summed over classes, averaged over
    pixels and batch; the teacher branch is constant."""
    x = np.asarray(x, dtype=np.float64)
    x_t = perturb_input(x, gamma, mu, sigma, rng)
    p_s = T.softmax(forward(student, x), axis=-3)
    p_t = T.softmax(forward(teacher.params, x_t), axis=-3).numpy()
    n_pix = np.prod(x.shape[-2:]) * (x.shape[0] if x.ndim == 4 else 1)
    return T.tsum(T.square(T.sub(p_s, p_t))) * (1.0 / n_pix)


def ema_update(teacher: TeacherState, student: Mapping) -> TeacherState:
    d = teacher.decay
    new = teacher.params.zip_map(student, lambda t, s: d * t + (1.0 - d) * np.asarray(s))
    return TeacherState(new, d)

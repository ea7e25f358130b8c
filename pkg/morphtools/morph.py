"""
Latent-space morph optimisation.

The morph starts from the average of the two subjects' latent codes and is
refined with Adam against the weighted sum of the perceptual, identity,
MS-SSIM and identity-difference losses. Only the latent code is optimised;
reference features and embeddings of the two subjects are computed once.
"""
from dataclasses import dataclass, field, replace
import math
import time

import numpy as np
import pandas as pd
from loguru import logger

from morphtools import tensor as T
from morphtools.errors import ConfigError, ModelContractError, OptimizationError
from morphtools.losses import (
    LossWeights,
    MsSsimParams,
    composite_loss,
    cosine_similarity,
    id_diff_loss,
    identity_loss,
    ms_ssim_loss,
    perceptual_loss,
)
from morphtools.tensor import Tensor, as_tensor

TRACE_COLUMNS = ["iteration", "lr", "total", "perceptual", "identity", "ms_ssim", "id_diff", "cos_1", "cos_2"]


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"latent code must be layers×dims, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("latent code contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def layers(self):
        return self.values.shape[0]

    @property
    def dims(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class OptimizerConfig:
    iterations: int = 150
    lr0: float = 0.03
    decay: float = 0.95
    decay_every: int = 6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    ms_ssim: MsSsimParams = field(default_factory=MsSsimParams)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not (0 < self.decay <= 1):
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not (self.lr0 > 0 and math.isfinite(self.lr0)) or self.eps <= 0:
            raise ConfigError("lr0 and eps must be positive")


@dataclass(frozen=True)
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def start(cls, params, cfg=None):
        params = np.array(params, dtype=np.float64)
        cfg = cfg or OptimizerConfig()
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0, cfg.beta1, cfg.beta2, cfg.eps)


@dataclass
class MorphResult:
    latent: LatentCode
    image: np.ndarray
    trace: pd.DataFrame
    final_losses: dict
    wall_time: float


def average_latents(l1, l2, w1=1.0, w2=1.0):
    a = l1 if isinstance(l1, LatentCode) else LatentCode(l1)
    b = l2 if isinstance(l2, LatentCode) else LatentCode(l2)
    if a.shape != b.shape:
        raise ValueError(f"latent shapes differ: {a.shape} vs {b.shape}")
    if not (math.isfinite(w1) and math.isfinite(w2)):
        raise ValueError("latent weights must be finite")
    return LatentCode((w1 * a.values + w2 * b.values) / 2.0)


def lr_at(iteration, cfg):
    if not (0 <= iteration < cfg.iterations):
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations})")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


def adam_step(state, grads, lr):
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.params.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match parameters {state.params.shape}")
    if not np.all(np.isfinite(grads)):
        raise OptimizationError(f"non-finite gradient at step {state.step}", iteration=state.step)
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, params=params, m=m, v=v, step=step)


def _loss_terms(models, image, reference, weights, ms_params):
    """Raw loss terms of one morph image; a term whose weight is zero is not evaluated."""
    (i1, i2), (f1, f2), (v1, v2) = reference
    vm = models.embed(image)
    zero = Tensor(0.0)
    parts = {
        "perceptual": perceptual_loss(f1, f2, models.features(image)) if weights.lambda1 > 0 else zero,
        "identity": identity_loss(v1, v2, vm) if weights.lambda2 > 0 else zero,
        "ms_ssim": ms_ssim_loss(i1, i2, image, ms_params) if weights.lambda3 > 0 else zero,
        "id_diff": id_diff_loss(v1, v2, vm) if weights.lambda4 > 0 else zero,
    }
    cosines = (cosine_similarity(v1, vm).item(), cosine_similarity(v2, vm).item())
    return parts, cosines


def _trace_frame(rows):
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def optimize_morph(i1, i2, models, cfg=None, latents=None, latent_weights=(1.0, 1.0)):
    """Optimise a morph of two face images; returns the final latent, image and per-iteration trace."""
    cfg = cfg or OptimizerConfig()
    i1, i2 = as_tensor(i1).detach(), as_tensor(i2).detach()
    started = time.perf_counter()

    if latents is None:
        latents = (models.predict_latent(i1), models.predict_latent(i2))
    init = average_latents(latents[0], latents[1], *latent_weights)
    if init.shape != tuple(models.latent_shape):
        raise ModelContractError(f"latent shape {init.shape} does not match models {tuple(models.latent_shape)}")

    reference = (
        (i1, i2),
        (models.features(i1).detached(), models.features(i2).detached()),
        (models.embed(i1).detach(), models.embed(i2).detach()),
    )
    state = AdamState.start(init.values, cfg)
    rows = []
    for it in range(cfg.iterations):
        lr = lr_at(it, cfg)
        latent = Tensor(state.params, requires_grad=True)
        image = models.generate(latent)
        try:
            parts, (cos_1, cos_2) = _loss_terms(models, image, reference, cfg.weights, cfg.ms_ssim)
        except ValueError as exc:
            raise OptimizationError(f"loss undefined at iteration {it}: {exc}", it, _trace_frame(rows)) from exc
        total = composite_loss(parts, cfg.weights)
        values = {name: part.item() for name, part in parts.items()}
        if not math.isfinite(total.item()) or not all(math.isfinite(x) for x in values.values()):
            raise OptimizationError(f"non-finite loss at iteration {it}", it, _trace_frame(rows))

        T.backward(total)
        grad = np.zeros_like(state.params) if latent.grad is None else latent.grad
        try:
            state = adam_step(state, grad, lr)
        except OptimizationError as exc:
            raise OptimizationError(str(exc), it, _trace_frame(rows)) from exc

        rows.append([it, lr, total.item(), values["perceptual"], values["identity"],
                     values["ms_ssim"], values["id_diff"], cos_1, cos_2])
        logger.debug("iter {:>4} lr={:.6f} total={:.6f} cos=({:.4f}, {:.4f})", it, lr, total.item(), cos_1, cos_2)

    final_latent = LatentCode(state.params)
    final_image = models.generate(Tensor(final_latent.values))
    parts, (cos_1, cos_2) = _loss_terms(models, final_image, reference, cfg.weights, cfg.ms_ssim)
    final_losses = {name: part.item() for name, part in parts.items()}
    final_losses["total"] = composite_loss(parts, cfg.weights).item()
    final_losses["cos_1"], final_losses["cos_2"] = cos_1, cos_2

    wall_time = time.perf_counter() - started
    logger.info("morph finished: {} iterations, total {:.6f} -> {:.6f} in {:.1f}s",
                cfg.iterations, rows[0][2], final_losses["total"], wall_time)
    return MorphResult(final_latent, final_image.numpy(), _trace_frame(rows), final_losses, wall_time)

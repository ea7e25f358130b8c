"""
Loss terms of the morph optimisation and the composite that weights them.

All losses take `Tensor`s (or arrays, which become constants) and return a
0-d `Tensor`, so they can be differentiated with respect to the morph branch.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from morphtools import tensor as T
from morphtools.errors import ConfigError
from morphtools.tensor import Tensor, as_tensor

# relative importance of the five dyadic scales, finest first
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.0002
    lambda2: float = 10.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    def as_dict(self):
        return {"lambda1": self.lambda1, "lambda2": self.lambda2,
                "lambda3": self.lambda3, "lambda4": self.lambda4}


@dataclass(frozen=True)
class MsSsimParams:
    scales: int = 5
    weights: tuple = MS_SSIM_WEIGHTS
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    adaptive_scales: bool = True

    def __post_init__(self):
        if self.scales < 1 or len(self.weights) < self.scales:
            raise ConfigError(f"need {self.scales} scale weights, got {len(self.weights)}")
        total = sum(self.weights[:self.scales])
        if abs(total - 1.0) > 1e-3:
            raise ConfigError(f"scale weights must sum to 1 (got {total})")
        if not (0 < self.k1 < 0.1 and 0 < self.k2 < 0.1):
            raise ConfigError("K1 and K2 must lie in (0, 0.1)")
        if self.window_size < 1 or self.sigma <= 0 or self.dynamic_range <= 0:
            raise ConfigError("invalid window or dynamic range")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def scale_weights(self, n_scales):
        """First `n_scales` weights rescaled to sum to exactly 1, ratios kept."""
        kept = np.asarray(self.weights[:n_scales], dtype=np.float64)
        return kept / kept.sum()

    def feasible_scales(self, height, width):
        side = min(height, width)
        if side < self.window_size:
            raise ValueError(f"image {height}×{width} smaller than the {self.window_size}-tap window")
        n = 1
        while n < self.scales and side // 2 ** n >= self.window_size:
            n += 1
        if n < self.scales and not self.adaptive_scales:
            raise ValueError(
                f"image {height}×{width} too small for {self.scales} scales "
                f"(min side {self.window_size * 2 ** (self.scales - 1)})")
        return n

    def window(self):
        offsets = np.arange(self.window_size) - (self.window_size - 1) / 2.0
        g = np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))
        g /= g.sum()
        return np.outer(g, g)


@dataclass
class FeatureLayer:
    layer_id: int
    name: str
    features: Tensor

    @property
    def size(self):
        return self.features.size


@dataclass
class FeatureStack:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        ids = [layer.layer_id for layer in self.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"layer ids must be strictly increasing, got {ids}")

    @property
    def layer_ids(self):
        return [layer.layer_id for layer in self.layers]

    def detached(self):
        return FeatureStack([FeatureLayer(l.layer_id, l.name, l.features.detach()) for l in self.layers])


# --- perceptual ---

def perceptual_loss(f1, f2, fm):
    signatures = [[(l.layer_id, l.features.shape) for l in s.layers] for s in (f1, f2, fm)]
    if signatures[0] != signatures[2] or signatures[1] != signatures[2]:
        all_ids = set(f1.layer_ids) | set(f2.layer_ids) | set(fm.layer_ids)
        divergent = sorted(
            i for i in all_ids
            if len({dict(sig).get(i) for sig in signatures}) > 1
        )
        raise ValueError(f"feature stacks disagree on layers {divergent}")

    total = None
    for a, b, m in zip(f1.layers, f2.layers, fm.layers):
        scale = 0.5 / m.size
        diff_a = a.features - m.features
        diff_b = b.features - m.features
        term = T.sum_(diff_a * diff_a) * scale + T.sum_(diff_b * diff_b) * scale
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# --- identity ---

def _vectors(*vs):
    out = [as_tensor(v) for v in vs]
    dims = {v.shape for v in out}
    if len(dims) != 1 or out[0].ndim != 1:
        raise ValueError(f"embeddings must be equal-length vectors, got {[v.shape for v in out]}")
    for v in out:
        norm = np.linalg.norm(v.data)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("zero-norm embedding: cosine distance undefined")
    return out


def cosine_similarity(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return T.sum_(a * b) / (T.sqrt(T.sum_(a * a)) * T.sqrt(T.sum_(b * b)))


def identity_loss(v1, v2, vm):
    v1, v2, vm = _vectors(v1, v2, vm)
    return ((1.0 - cosine_similarity(v1, vm)) + (1.0 - cosine_similarity(v2, vm))) / 2.0


def id_diff_loss(v1, v2, vm):
    v1, v2, vm = _vectors(v1, v2, vm)
    return abs((1.0 - cosine_similarity(v1, vm)) - (1.0 - cosine_similarity(v2, vm)))


def identity_loss_grad_analytic(v1, v2, vm):
    """Closed form of dLoss_Identity/dz_d, term for term.

    The leading constant 1 and the dropped cross terms make it differ from the
    true derivative; see `identity_loss_grad_exact`.
    """
    v1, v2, vm = (t.data for t in _vectors(v1, v2, vm))
    z_sq = vm * vm
    rest = z_sq.sum() - z_sq
    coef = v1 / (2.0 * np.linalg.norm(v1)) + v2 / (2.0 * np.linalg.norm(v2))
    return 1.0 - coef * rest / (z_sq + rest) ** 1.5


def identity_loss_grad_exact(v1, v2, vm):
    v1, v2, vm = (t.data for t in _vectors(v1, v2, vm))
    nz = np.linalg.norm(vm)
    grad = np.zeros_like(vm)
    for v in (v1, v2):
        nv = np.linalg.norm(v)
        grad -= 0.5 * (v / (nv * nz) - (v @ vm) * vm / (nv * nz ** 3))
    return grad


def compare_identity_gradients(v1, v2, vm):
    """Autodiff, exact and closed-form gradients side by side, with their deltas."""
    target = Tensor(as_tensor(vm).data, requires_grad=True)
    T.backward(identity_loss(v1, v2, target))
    autodiff = target.grad
    exact = identity_loss_grad_exact(v1, v2, vm)
    closed = identity_loss_grad_analytic(v1, v2, vm)
    return {
        "grad_autodiff": autodiff,
        "grad_exact": exact,
        "grad_closed_form": closed,
        "max_delta_autodiff_exact": float(np.max(np.abs(autodiff - exact))),
        "max_delta_closed_form_autodiff": float(np.max(np.abs(closed - autodiff))),
    }


# --- structural similarity ---

def _filter(image, window):
    h, w = image.shape
    out = T.conv2d(T.reshape(image, (1, h, w)), window)
    return T.reshape(out, out.shape[1:])


def windowed_moments(x, y, params):
    window = Tensor(params.window()[None])
    mu_x, mu_y = _filter(x, window), _filter(y, window)
    var_x = _filter(x * x, window) - mu_x * mu_x
    var_y = _filter(y * y, window) - mu_y * mu_y
    cov = _filter(x * y, window) - mu_x * mu_y
    return mu_x, mu_y, var_x, var_y, cov


def check_image_pair(x, y, params):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim not in (2, 3):
        raise ValueError(f"expected h×w or c×h×w images, got {x.shape}")
    h, w = x.shape[-2:]
    if min(h, w) < params.window_size:
        raise ValueError(f"image {h}×{w} smaller than the {params.window_size}-tap window")
    return x, y


def luminance_map(mu_x, mu_y, params):
    return (2.0 * mu_x * mu_y + params.c1) / (mu_x * mu_x + mu_y * mu_y + params.c1)


def contrast_structure_map(var_x, var_y, cov, params):
    # equals c*s when C3 = C2/2, without a square root in the graph
    return (2.0 * cov + params.c2) / (var_x + var_y + params.c2)


def ssim_components(x, y, params=MsSsimParams()):
    """Luminance, contrast and structure maps of two h×w images."""
    x, y = check_image_pair(x, y, params)
    if x.ndim != 2:
        raise ValueError(f"ssim_components expects h×w images, got {x.shape}")
    mu_x, mu_y, var_x, var_y, cov = windowed_moments(x, y, params)
    sigma_x = T.sqrt(T.clamp_min(var_x, 0.0))
    sigma_y = T.sqrt(T.clamp_min(var_y, 0.0))
    c3 = params.c2 / 2.0
    lum = luminance_map(mu_x, mu_y, params)
    con = (2.0 * sigma_x * sigma_y + params.c2) / (var_x + var_y + params.c2)
    struct = (cov + c3) / (sigma_x * sigma_y + c3)
    return lum, con, struct


def _ms_ssim_channel(x, y, params, n_scales, weights):
    value = None
    for j in range(n_scales):
        mu_x, mu_y, var_x, var_y, cov = windowed_moments(x, y, params)
        cs = T.clamp_min(T.mean(contrast_structure_map(var_x, var_y, cov, params)), 0.0)
        factor = cs ** float(weights[j])
        if j == n_scales - 1:
            lum = T.clamp_min(T.mean(luminance_map(mu_x, mu_y, params)), 0.0)
            factor = factor * lum ** float(weights[j])
        value = factor if value is None else value * factor
        if j < n_scales - 1:
            x, y = T.downsample2x(x), T.downsample2x(y)
    return value


def ms_ssim(x, y, params=MsSsimParams()):
    """Multi-scale SSIM of two h×w or c×h×w images (channel mean for colour)."""
    x, y = check_image_pair(x, y, params)
    n_scales = params.feasible_scales(*x.shape[-2:])
    weights = params.scale_weights(n_scales)
    if x.ndim == 2:
        return _ms_ssim_channel(x, y, params, n_scales, weights)
    total = None
    for c in range(x.shape[0]):
        value = _ms_ssim_channel(x[c], y[c], params, n_scales, weights)
        total = value if total is None else total + value
    return total / float(x.shape[0])


def ms_ssim_loss(i1, i2, im, params=MsSsimParams()):
    i1, i2, im = as_tensor(i1), as_tensor(i2), as_tensor(im)
    if not (i1.shape == i2.shape == im.shape):
        raise ValueError(f"image shapes differ: {i1.shape}, {i2.shape}, {im.shape}")
    return 0.5 * (1.0 - ms_ssim(i1, im, params)) + 0.5 * (1.0 - ms_ssim(i2, im, params))


# --- composite ---

LOSS_TERMS = ("perceptual", "identity", "ms_ssim", "id_diff")


def composite_loss(parts, weights):
    """Weighted sum of the four terms; a missing part counts as zero."""
    if not isinstance(weights, LossWeights):
        weights = LossWeights(**weights)
    lambdas = dict(zip(LOSS_TERMS, weights.as_dict().values()))
    unknown = set(parts) - set(LOSS_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    total = Tensor(0.0)
    for name in LOSS_TERMS:
        part = parts.get(name)
        if part is None:
            continue
        part = as_tensor(part)
        if part.ndim != 0:
            raise ValueError(f"loss term {name} must be a scalar, got shape {part.shape}")
        total = total + lambdas[name] * part
    return total

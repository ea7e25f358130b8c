"""
Model bundle used by the morph loop, the deterministic toy networks and the
binary weight container they are stored in.

The toy networks stand in for the face generator, the face recognition
embedder and the perceptual feature net. They are small, seed-determined and
differentiable end to end through `morphtools.tensor`.
"""
from dataclasses import dataclass, field
import json
import math
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from morphtools import tensor as T
from morphtools.errors import (
    BadMagicError,
    ConfigError,
    ContainerVersionError,
    ModelContractError,
    ModelError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from morphtools.losses import FeatureLayer, FeatureStack
from morphtools.tensor import Tensor, as_tensor

MAGIC = b"MBWT"
CONTAINER_VERSION = b"0001"
LOW_RES = 8

# (name, layer id, out channels, kernel, stride)
PERCEPTUAL_TAPS = (
    ("conv1_1", 1, 4, 3, 1),
    ("conv1_2", 2, 4, 3, 1),
    ("conv2_2", 3, 8, 3, 2),
    ("conv3_3", 4, 8, 3, 2),
)
EMBEDDER_CONVS = (("emb.conv1", 8, 4, 2, 3.0), ("emb.conv2", 16, 3, 2, 2.0))


@dataclass(frozen=True)
class ModelBundle:
    generator: object
    embedder: object
    perceptual: object
    latent_shape: tuple
    image_shape: tuple
    embed_dim: int
    config: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict, repr=False)
    predictor: object = None
    source: str = "custom"

    def generate(self, latent):
        latent = as_tensor(latent)
        if latent.shape != tuple(self.latent_shape):
            raise ModelContractError(f"latent shape {latent.shape}, generator expects {tuple(self.latent_shape)}")
        image = self.generator(latent)
        if image.shape != tuple(self.image_shape):
            raise ModelContractError(f"generator returned {image.shape}, declared {tuple(self.image_shape)}")
        return image

    def embed(self, image):
        self._check_image(image)
        embedding = self.embedder(as_tensor(image))
        if embedding.shape != (self.embed_dim,):
            raise ModelContractError(f"embedder returned {embedding.shape}, declared ({self.embed_dim},)")
        return embedding

    def features(self, image):
        self._check_image(image)
        stack = self.perceptual(as_tensor(image))
        if not isinstance(stack, FeatureStack):
            raise ModelContractError("perceptual net must return a FeatureStack")
        return stack

    def predict_latent(self, image):
        if self.predictor is None:
            raise ModelError(f"bundle '{self.source}' has no latent predictor; supply latents")
        self._check_image(image)
        return self.predictor(np.asarray(as_tensor(image).data))

    def _check_image(self, image):
        shape = as_tensor(image).shape
        if shape != tuple(self.image_shape):
            raise ModelContractError(f"image shape {shape}, models expect {tuple(self.image_shape)}")


def bilinear_matrix(side, low_res=LOW_RES):
    """Align-corners linear interpolation from `low_res` samples to `side`."""
    u = np.zeros((side, low_res))
    positions = np.arange(side) * (low_res - 1) / (side - 1)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, low_res - 1)
    frac = positions - lo
    u[np.arange(side), lo] += 1.0 - frac
    u[np.arange(side), hi] += frac
    return u


def expected_shapes(config):
    side = config["image_side"]
    layers, dims = config["latent_layers"], config["latent_dims"]
    shapes = {
        "gen.proj": (dims, 3 * LOW_RES * LOW_RES),
        "gen.mix": (1, layers),
        "gen.bias": (1, 3 * LOW_RES * LOW_RES),
    }
    channels, size = 3, side
    for name, out, k, stride, _ in EMBEDDER_CONVS:
        shapes[name] = (out, channels, k, k)
        channels, size = out, (size - k) // stride + 1
    shapes["emb.head"] = (channels * size * size, config["embed_dim"])
    channels = 3
    for name, _, out, k, _ in PERCEPTUAL_TAPS:
        shapes[f"perc.{name}"] = (out, channels, k, k)
        channels = out
    return shapes


def _validate_config(config):
    if config["image_side"] < 32:
        raise ConfigError(f"image_side must be >= 32, got {config['image_side']}")
    if config["embed_dim"] < 8:
        raise ConfigError(f"embed_dim must be >= 8, got {config['embed_dim']}")
    if config["latent_layers"] < 1 or config["latent_dims"] < 1:
        raise ConfigError("latent shape must be positive")


def _draw_weights(rng, config):
    shapes = expected_shapes(config)
    layers, dims = config["latent_layers"], config["latent_dims"]
    weights = {
        "gen.proj": rng.standard_normal(shapes["gen.proj"]) * 1.5 * math.sqrt(layers / dims),
        "gen.mix": (1.0 + 0.1 * rng.standard_normal(shapes["gen.mix"])) / layers,
        "gen.bias": 0.5 * rng.standard_normal(shapes["gen.bias"]),
    }
    for name, _, _, _, gain in EMBEDDER_CONVS:
        shape = shapes[name]
        weights[name] = rng.standard_normal(shape) * gain / math.sqrt(np.prod(shape[1:]))
    head = shapes["emb.head"]
    weights["emb.head"] = rng.standard_normal(head) / math.sqrt(head[0])
    for name, *_ in PERCEPTUAL_TAPS:
        shape = shapes[f"perc.{name}"]
        weights[f"perc.{name}"] = rng.standard_normal(shape) / math.sqrt(np.prod(shape[1:]))
    return weights


def bundle_from_weights(weights, config, source="custom"):
    """Wire frozen weight arrays into generator, embedder, perceptual net and predictor."""
    _validate_config(config)
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in weights or tuple(weights[name].shape) != shape:
            got = None if name not in weights else tuple(weights[name].shape)
            raise ShapeMismatchError(f"tensor {name}: expected {shape}, got {got}")
    frozen = {}
    for name in shapes:
        array = np.array(weights[name], dtype=np.float64)
        array.setflags(write=False)
        frozen[name] = array

    side = config["image_side"]
    latent_shape = (config["latent_layers"], config["latent_dims"])
    image_shape = (3, side, side)
    upsample = np.kron(bilinear_matrix(side), bilinear_matrix(side))
    upsample_t = Tensor(upsample.T)
    proj, mix, bias = Tensor(frozen["gen.proj"]), Tensor(frozen["gen.mix"]), Tensor(frozen["gen.bias"])

    def generator(latent):
        low = mix @ (latent @ proj) + bias
        logits = T.reshape(low, (3, LOW_RES * LOW_RES)) @ upsample_t
        return T.sigmoid(T.reshape(logits, image_shape))

    def embedder(image):
        x = image - 0.5
        for name, _, _, stride, _ in EMBEDDER_CONVS:
            x = T.tanh(T.conv2d(x, Tensor(frozen[name]), stride=stride))
        flat = T.reshape(x, (1, x.size))
        return T.reshape(flat @ Tensor(frozen["emb.head"]), (config["embed_dim"],))

    def perceptual(image):
        x = image - 0.5
        layers = []
        for name, layer_id, _, _, stride in PERCEPTUAL_TAPS:
            x = T.tanh(T.conv2d(x, Tensor(frozen[f"perc.{name}"]), stride=stride))
            layers.append(FeatureLayer(layer_id, name, x))
        return FeatureStack(layers)

    upsample_pinv = np.linalg.pinv(upsample)
    proj_pinv = np.linalg.pinv(frozen["gen.proj"])
    mix_row = frozen["gen.mix"][0]

    def predictor(image):
        # least-squares inversion of the generator's linear part
        clipped = np.clip(image.reshape(3, side * side), 1e-6, 1.0 - 1e-6)
        logits = np.log(clipped / (1.0 - clipped))
        low = (upsample_pinv @ logits.T).T.reshape(1, -1)
        row = (low - frozen["gen.bias"]) @ proj_pinv
        return np.outer(mix_row / (mix_row @ mix_row), row[0])

    return ModelBundle(
        generator=generator,
        embedder=embedder,
        perceptual=perceptual,
        latent_shape=latent_shape,
        image_shape=image_shape,
        embed_dim=config["embed_dim"],
        config=dict(config),
        weights=frozen,
        predictor=predictor,
        source=source,
    )


def make_toy_models(seed, image_side=64, latent=(18, 512), embed_dim=64):
    config = {
        "seed": int(seed),
        "image_side": int(image_side),
        "latent_layers": int(latent[0]),
        "latent_dims": int(latent[1]),
        "embed_dim": int(embed_dim),
    }
    _validate_config(config)
    weights = _draw_weights(np.random.default_rng(seed), config)
    logger.debug("toy models seed={} side={} latent={} embed_dim={}", seed, image_side, latent, embed_dim)
    return bundle_from_weights(weights, config, source=f"toy:{seed}")


# --- weight container ---

def save_model_weights(models, path):
    if not models.weights:
        raise ModelError("bundle carries no weight arrays to save")
    names = list(expected_shapes(models.config))
    payload = b"".join(np.ascontiguousarray(models.weights[n], dtype="<f8").tobytes() for n in names)
    manifest = {
        "version": 1,
        "config": models.config,
        "payload_bytes": len(payload),
        "tensors": [{"name": n, "shape": list(models.weights[n].shape)} for n in names],
    }
    encoded = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.write_bytes(MAGIC + CONTAINER_VERSION + struct.pack("<Q", len(encoded)) + encoded + payload)
    logger.info("saved {} tensors ({} bytes) to {}", len(names), len(payload), path)
    return path


def _read_manifest(blob, path):
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a weight container (bad magic)")
    if blob[4:8] != CONTAINER_VERSION:
        raise ContainerVersionError(f"{path}: unsupported container version {blob[4:8]!r}")
    (length,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + length:
        raise TruncatedPayloadError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadMagicError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != 1:
        raise ContainerVersionError(f"{path}: unsupported manifest version {manifest.get('version')}")
    return manifest, blob[16 + length:]


def load_model_weights(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ModelError(f"cannot read weight file {path}: {exc}") from exc
    manifest, payload = _read_manifest(blob, path)

    tensors = manifest.get("tensors", [])
    declared = sum(8 * int(np.prod(t["shape"])) for t in tensors)
    if declared != manifest.get("payload_bytes"):
        raise ShapeMismatchError(
            f"{path}: tensors declare {declared} bytes, payload_bytes is {manifest.get('payload_bytes')}")
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {declared} bytes")

    weights, offset = {}, 0
    for entry in tensors:
        count = int(np.prod(entry["shape"]))
        weights[entry["name"]] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
    try:
        config = {k: int(manifest["config"][k]) for k in
                  ("seed", "image_side", "latent_layers", "latent_dims", "embed_dim")}
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatchError(f"{path}: manifest config incomplete ({exc})") from exc
    try:
        bundle = bundle_from_weights(weights, config, source=str(path))
    except ConfigError as exc:
        raise ShapeMismatchError(f"{path}: {exc}") from exc
    logger.info("loaded {} tensors from {}", len(weights), path)
    return bundle


def resolve_models(spec, image_side=64, latent=(18, 512), embed_dim=64):
    """`toy:<seed>` builds toy models, anything else is a weight file path."""
    spec = str(spec)
    if spec.startswith("toy:"):
        try:
            seed = int(spec[4:])
        except ValueError as exc:
            raise ConfigError(f"bad toy model seed in '{spec}'") from exc
        return make_toy_models(seed, image_side=image_side, latent=latent, embed_dim=embed_dim)
    return load_model_weights(spec)

"""Encoder, decoder and boundary nets sharing one latent space.

All three are small fully-connected stacks over a single parameter store:

    encoder   image pixels -> 256 -> 64 -> latent      (relu, identity out)
    decoder   latent -> 64 -> 256 -> image pixels      (relu, sigmoid out)
    boundary  5 params -> 32 -> 32 -> latent           (relu, identity out)

The sigmoid output keeps decoded pixels inside (0, 1), matching the
normalized image range. Weights initialize uniformly within the
fan-based bound sqrt(6 / (fan_in + fan_out)); biases start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .errors import ConfigError, DataIOError

WEIGHTS_SCHEMA_VERSION = 1

DEFAULT_LATENT_DIM = 16
DEFAULT_ENCODER_HIDDEN = (256, 64)
DEFAULT_DECODER_HIDDEN = (64, 256)
DEFAULT_BOUNDARY_HIDDEN = (32, 32)
PARAM_DIM = 5


@dataclass(frozen=True)
class NetSpec:
    """Layer plan for one fully-connected net."""

    name: str
    sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ConfigError(f"net {self.name!r} needs at least input and output sizes")
        if any(s < 1 for s in self.sizes):
            raise ConfigError(f"net {self.name!r} has non-positive layer size: {self.sizes}")


class Mlp:
    """A dense stack registered in a shared ParamStore."""

    def __init__(self, spec: NetSpec, store: ad.ParamStore, rng: np.random.Generator):
        self.spec = spec
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(spec.sizes, spec.sizes[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = store.add(f"{spec.name}.w{i}", rng.uniform(-bound, bound, (fan_in, fan_out)))
            b = store.add(f"{spec.name}.b{i}", np.zeros(fan_out))
            self.weights.append(w)
            self.biases.append(b)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.affine(x, w, b)
            kind = self.spec.output_activation if i == last else self.spec.hidden_activation
            x = ad.activation(x, kind)
        return x

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward pass; used for evaluation and clustering."""
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            kind = self.spec.output_activation if i == last else self.spec.hidden_activation
            if kind == "relu":
                x = np.maximum(x, 0.0)
            elif kind == "sigmoid":
                x = ad._sigmoid(x)
        return x


class NetBundle:
    """The three nets plus their shared parameter store and optimizer surface."""

    def __init__(self, seed: int, latent_dim: int = DEFAULT_LATENT_DIM,
                 image_pixels: int = 676, param_dim: int = PARAM_DIM,
                 encoder_hidden: tuple[int, ...] = DEFAULT_ENCODER_HIDDEN,
                 decoder_hidden: tuple[int, ...] = DEFAULT_DECODER_HIDDEN,
                 boundary_hidden: tuple[int, ...] = DEFAULT_BOUNDARY_HIDDEN):
        specs = (
            NetSpec("encoder", (image_pixels, *encoder_hidden, latent_dim)),
            NetSpec("decoder", (latent_dim, *decoder_hidden, image_pixels),
                    output_activation="sigmoid"),
            NetSpec("boundary", (param_dim, *boundary_hidden, latent_dim)),
        )
        self._init_from_specs(specs, seed)

    @classmethod
    def from_specs(cls, encoder: NetSpec, decoder: NetSpec, boundary: NetSpec,
                   seed: int) -> "NetBundle":
        bundle = cls.__new__(cls)
        bundle._init_from_specs((encoder, decoder, boundary), seed)
        return bundle

    def _init_from_specs(self, specs: tuple[NetSpec, NetSpec, NetSpec], seed: int):
        encoder, decoder, boundary = specs
        latent = encoder.sizes[-1]
        if decoder.sizes[0] != latent or boundary.sizes[-1] != latent:
            raise ConfigError(
                "latent dimension mismatch: encoder out "
                f"{encoder.sizes[-1]}, decoder in {decoder.sizes[0]}, "
                f"boundary out {boundary.sizes[-1]}"
            )
        if decoder.sizes[-1] != encoder.sizes[0]:
            raise ConfigError(
                f"decoder output {decoder.sizes[-1]} does not match "
                f"encoder input {encoder.sizes[0]}"
            )
        self.seed = seed
        self.latent_dim = latent
        self.image_pixels = encoder.sizes[0]
        self.param_dim = boundary.sizes[0]
        self.store = ad.ParamStore()
        rng = np.random.default_rng(seed)
        self.encoder = Mlp(encoder, self.store, rng)
        self.decoder = Mlp(decoder, self.store, rng)
        self.boundary = Mlp(boundary, self.store, rng)

    def _as_input(self, x, width: int, what: str) -> ad.Tensor:
        t = x if isinstance(x, ad.Tensor) else ad.constant(np.atleast_2d(x))
        if t.data.ndim != 2 or t.shape[1] != width:
            raise ConfigError(f"{what} expects (n, {width}) input, got {t.shape}")
        return t

    def encode(self, images) -> ad.Tensor:
        return self.encoder.forward(self._as_input(images, self.image_pixels, "encode"))

    def decode(self, latents) -> ad.Tensor:
        return self.decoder.forward(self._as_input(latents, self.latent_dim, "decode"))

    def boundary_map(self, params) -> ad.Tensor:
        return self.boundary.forward(self._as_input(params, self.param_dim, "boundary_map"))

    def encode_np(self, images: np.ndarray) -> np.ndarray:
        return self.encoder.forward_np(np.atleast_2d(images))

    def decode_np(self, latents: np.ndarray) -> np.ndarray:
        return self.decoder.forward_np(np.atleast_2d(latents))

    def boundary_np(self, params: np.ndarray) -> np.ndarray:
        return self.boundary.forward_np(np.atleast_2d(params))

    def predict_np(self, params: np.ndarray) -> np.ndarray:
        """Parameter vector to image along the boundary-decoder path."""
        return self.decode_np(self.boundary_np(params))

    def hidden_sizes(self) -> dict[str, list[int]]:
        return {
            "encoder_hidden": list(self.encoder.spec.sizes[1:-1]),
            "decoder_hidden": list(self.decoder.spec.sizes[1:-1]),
            "boundary_hidden": list(self.boundary.spec.sizes[1:-1]),
        }


def save_weights(bundle: NetBundle, path, extra: dict | None = None,
                 extra_blocks: dict[str, np.ndarray] | None = None) -> None:
    """Checkpoint the bundle in the shared container format."""
    manifest = {
        "kind": "weights",
        "schema_version": WEIGHTS_SCHEMA_VERSION,
        "seed": bundle.seed,
        "latent_dim": bundle.latent_dim,
        "image_pixels": bundle.image_pixels,
        "param_dim": bundle.param_dim,
        **bundle.hidden_sizes(),
        "extra": extra or {},
    }
    blocks = {name: t.data for name, t in bundle.store.items()}
    for name, arr in (extra_blocks or {}).items():
        key = f"extra.{name}"
        if key in blocks:
            raise ConfigError(f"extra block name collides: {name!r}")
        blocks[key] = np.asarray(arr, dtype=np.float64)
    write_container(path, manifest, blocks)


def load_weights(path) -> tuple[NetBundle, dict, dict[str, np.ndarray]]:
    """Rebuild a bundle from a checkpoint; returns (bundle, extra, extra_blocks)."""
    manifest, blocks = read_container(
        path, expected_kind="weights", expected_version=WEIGHTS_SCHEMA_VERSION
    )
    bundle = NetBundle(
        seed=int(manifest["seed"]),
        latent_dim=int(manifest["latent_dim"]),
        image_pixels=int(manifest["image_pixels"]),
        param_dim=int(manifest["param_dim"]),
        encoder_hidden=tuple(manifest["encoder_hidden"]),
        decoder_hidden=tuple(manifest["decoder_hidden"]),
        boundary_hidden=tuple(manifest["boundary_hidden"]),
    )
    extra_blocks: dict[str, np.ndarray] = {}
    for name, arr in blocks.items():
        if name.startswith("extra."):
            extra_blocks[name[len("extra."):]] = arr
            continue
        if name not in bundle.store:
            raise DataIOError(f"{path}: unknown parameter block {name!r}")
        tensor = bundle.store[name]
        if tensor.data.shape != arr.shape:
            raise DataIOError(
                f"{path}: parameter {name!r} shape {arr.shape} does not match "
                f"expected {tensor.data.shape}"
            )
        tensor.data[...] = arr
    missing = set(bundle.store.names()) - set(blocks)
    if missing:
        raise DataIOError(f"{path}: missing parameter blocks: {sorted(missing)}")
    return bundle, dict(manifest.get("extra", {})), extra_blocks

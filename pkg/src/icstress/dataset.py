"""Full-factorial DOE enumeration and the deterministic stress surrogate.

The dataset covers a two-die IC package: four material/geometry factors at
five levels each, crossed with three cross-section layers, for 1875 cases.
Each case gets a 26x26 stress image from a closed-form surrogate field:
a Gaussian stress concentration around the die boundaries on top of a
uniform far-field term, both scaled by an EMC material factor. The layer
constants make the overmold field sharp and parameter-sensitive and the
RDL field flat, so per-image variance orders Overmold > UF > RDL for every
geometry, and every pixel grows strictly with EMC modulus and CTE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataIOError, ValidationError

DATASET_SCHEMA_VERSION = 1

IMAGE_SIZE = 26
IMAGE_PIXELS = IMAGE_SIZE * IMAGE_SIZE
DOMAIN_MM = 5.0  # physical window edge length, centered on the package


class Layer(IntEnum):
    OVERMOLD = 0
    UF = 1
    RDL = 2


PARAM_NAMES = ("emc_modulus", "emc_cte", "die_size", "gap_size")

# Factor levels: modulus in GPa, CTE in ppm/degC, die and gap in mm.
DEFAULT_LEVELS: dict[str, tuple[float, ...]] = {
    "emc_modulus": (5.0, 11.0, 17.0, 23.0, 30.0),
    "emc_cte": (5.0, 9.0, 12.0, 16.0, 20.0),
    "die_size": (0.5, 0.8, 1.2, 1.5, 1.8),
    "gap_size": (0.2, 0.4, 0.6, 0.8, 1.0),
}

# Allowed min/max per factor; also the min-max normalization ranges.
PARAM_RANGES: dict[str, tuple[float, float]] = {
    "emc_modulus": (5.0, 30.0),
    "emc_cte": (5.0, 20.0),
    "die_size": (0.5, 1.8),
    "gap_size": (0.2, 1.0),
}

# Per-layer surrogate constants: peak amplitude (MPa), Gaussian decay
# length (mm), uniform far-field background (MPa).
SURROGATE_CONSTANTS: dict[Layer, tuple[float, float, float]] = {
    Layer.OVERMOLD: (100.0, 0.15, 10.0),
    Layer.UF: (40.0, 0.40, 20.0),
    Layer.RDL: (15.0, 0.80, 25.0),
}


@dataclass(frozen=True)
class ParamVector:
    emc_modulus: float
    emc_cte: float
    die_size: float
    gap_size: float
    layer: Layer

    def numeric(self) -> tuple[float, float, float, float]:
        return (self.emc_modulus, self.emc_cte, self.die_size, self.gap_size)


@dataclass(frozen=True)
class DOEGrid:
    levels: dict[str, tuple[float, ...]] = field(
        default_factory=lambda: dict(DEFAULT_LEVELS)
    )

    def __post_init__(self):
        for name in PARAM_NAMES:
            values = self.levels.get(name)
            if not values:
                raise ConfigError(f"empty level list for {name!r}")
            lo, hi = PARAM_RANGES[name]
            for v in values:
                if not (lo <= v <= hi):
                    raise ConfigError(
                        f"level {v} for {name!r} outside range [{lo}, {hi}]"
                    )
        unknown = set(self.levels) - set(PARAM_NAMES)
        if unknown:
            raise ConfigError(f"unknown DOE parameters: {sorted(unknown)}")

    def cases_per_layer(self) -> int:
        n = 1
        for name in PARAM_NAMES:
            n *= len(self.levels[name])
        return n


@dataclass
class StressImage:
    values: np.ndarray  # (26, 26), raw MPa or normalized [0, 1]
    layer: Layer
    params: ParamVector


def enumerate_doe(grid: DOEGrid | None = None) -> list[ParamVector]:
    """All cases, lexicographic in (layer, modulus, cte, die, gap)."""
    grid = grid or DOEGrid()
    out = []
    for layer in Layer:
        for e in grid.levels["emc_modulus"]:
            for c in grid.levels["emc_cte"]:
                for d in grid.levels["die_size"]:
                    for g in grid.levels["gap_size"]:
                        out.append(ParamVector(e, c, d, g, layer))
    return out


def _check_in_range(p: ParamVector) -> None:
    for name in PARAM_NAMES:
        lo, hi = PARAM_RANGES[name]
        v = getattr(p, name)
        if not (lo <= v <= hi):
            raise ValidationError(f"{name}={v} outside range [{lo}, {hi}]")


def _pixel_grid() -> tuple[np.ndarray, np.ndarray]:
    # Pixel centers mapped to physical mm, row-major values[row, col].
    frac = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE
    coords = (frac - 0.5) * DOMAIN_MM
    return np.meshgrid(coords, coords, indexing="xy")  # X varies per column


_GRID_X, _GRID_Y = _pixel_grid()


def _die_boundary_distance(x, y, cx: float, half: float) -> np.ndarray:
    """Unsigned distance to the boundary of the square die centered (cx, 0)."""
    qx = np.abs(x - cx) - half
    qy = np.abs(y) - half
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return np.abs(outside + inside)


def synthesize_stress_image(p: ParamVector, constants=None) -> StressImage:
    """Deterministic raw-MPa surrogate field for one case."""
    _check_in_range(p)
    constants = constants or SURROGATE_CONSTANTS
    amplitude, length, background = constants[p.layer]
    half = p.die_size / 2.0
    cx = p.gap_size / 2.0 + half
    delta = np.minimum(
        _die_boundary_distance(_GRID_X, _GRID_Y, cx, half),
        _die_boundary_distance(_GRID_X, _GRID_Y, -cx, half),
    )
    material = (p.emc_modulus / 30.0) * (p.emc_cte / 20.0)
    values = amplitude * material * np.exp(-((delta / length) ** 2)) + background * material
    return StressImage(values=values, layer=p.layer, params=p)


def normalize_params(p: ParamVector) -> np.ndarray:
    """Min-max to [0, 1]^5; layer maps to index / 2."""
    _check_in_range(p)
    out = np.empty(5, dtype=np.float64)
    for i, name in enumerate(PARAM_NAMES):
        lo, hi = PARAM_RANGES[name]
        out[i] = (getattr(p, name) - lo) / (hi - lo)
    out[4] = int(p.layer) / 2.0
    return out


@dataclass
class DatasetManifest:
    schema_version: int
    levels: dict[str, tuple[float, ...]]
    normalization: str  # "global" or "per_layer"
    global_min: float
    global_max: float
    layer_min: tuple[float, float, float]
    layer_max: tuple[float, float, float]
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    seed: int
    surrogate: dict[int, tuple[float, float, float]]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "levels": {k: list(v) for k, v in self.levels.items()},
            "normalization": self.normalization,
            "global_min": self.global_min,
            "global_max": self.global_max,
            "layer_min": list(self.layer_min),
            "layer_max": list(self.layer_max),
            "train_indices": list(self.train_indices),
            "test_indices": list(self.test_indices),
            "seed": self.seed,
            "surrogate": {str(int(k)): list(v) for k, v in self.surrogate.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            schema_version=int(d["schema_version"]),
            levels={k: tuple(v) for k, v in d["levels"].items()},
            normalization=d["normalization"],
            global_min=float(d["global_min"]),
            global_max=float(d["global_max"]),
            layer_min=tuple(d["layer_min"]),
            layer_max=tuple(d["layer_max"]),
            train_indices=tuple(int(i) for i in d["train_indices"]),
            test_indices=tuple(int(i) for i in d["test_indices"]),
            seed=int(d["seed"]),
            surrogate={int(k): tuple(v) for k, v in d["surrogate"].items()},
        )


class StressDataset:
    """All cases plus their normalized images and the split manifest."""

    def __init__(self, params: list[ParamVector], images: np.ndarray,
                 manifest: DatasetManifest):
        if images.shape != (len(params), IMAGE_PIXELS):
            raise ConfigError(
                f"images shape {images.shape} does not match "
                f"{len(params)} cases x {IMAGE_PIXELS} pixels"
            )
        self.params = params
        self.images = images
        self.manifest = manifest
        self._norm_params: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.params)

    def norm_param_matrix(self) -> np.ndarray:
        if self._norm_params is None:
            self._norm_params = np.stack([normalize_params(p) for p in self.params])
        return self._norm_params

    def layer_of(self, index: int) -> Layer:
        return self.params[index].layer

    def train_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        idx = list(self.manifest.train_indices)
        return self.norm_param_matrix()[idx], self.images[idx]

    def test_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        idx = list(self.manifest.test_indices)
        return self.norm_param_matrix()[idx], self.images[idx]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StressDataset)
            and self.params == other.params
            and self.images.shape == other.images.shape
            and bool(np.array_equal(self.images, other.images))
            and self.manifest == other.manifest
        )


def normalize_images(raw: np.ndarray, layers: np.ndarray, mode: str = "global"
                     ) -> tuple[np.ndarray, dict]:
    """Map raw MPa images into [0, 1]; returns (normalized, extrema info)."""
    if mode not in ("global", "per_layer"):
        raise ConfigError(f"unknown normalization mode {mode!r}")
    gmin = float(raw.min())
    gmax = float(raw.max())
    layer_min = []
    layer_max = []
    for layer in Layer:
        sel = raw[layers == int(layer)]
        layer_min.append(float(sel.min()))
        layer_max.append(float(sel.max()))
    if mode == "global":
        if gmax == gmin:
            raise ValidationError("degenerate normalization: max equals min")
        normalized = (raw - gmin) / (gmax - gmin)
    else:
        normalized = np.empty_like(raw)
        for layer in Layer:
            lo, hi = layer_min[int(layer)], layer_max[int(layer)]
            if hi == lo:
                raise ValidationError(
                    f"degenerate normalization: max equals min in layer {layer.name}"
                )
            sel = layers == int(layer)
            normalized[sel] = (raw[sel] - lo) / (hi - lo)
    info = {
        "global_min": gmin,
        "global_max": gmax,
        "layer_min": tuple(layer_min),
        "layer_max": tuple(layer_max),
    }
    return normalized, info


def denormalize_images(normalized: np.ndarray, manifest: DatasetManifest,
                       layers: np.ndarray | None = None) -> np.ndarray:
    if manifest.normalization == "global":
        return normalized * (manifest.global_max - manifest.global_min) + manifest.global_min
    out = np.empty_like(normalized)
    for layer in Layer:
        lo = manifest.layer_min[int(layer)]
        hi = manifest.layer_max[int(layer)]
        sel = layers == int(layer)
        out[sel] = normalized[sel] * (hi - lo) + lo
    return out


def split_train_test(params: list[ParamVector], n_train: int, seed: int,
                     stratify: bool = True) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Seeded disjoint split; stratified so each layer contributes equally."""
    total = len(params)
    if not 0 < n_train < total:
        raise ConfigError(f"n_train must be in (0, {total}), got {n_train}")
    rng = np.random.default_rng(seed)
    if stratify:
        n_layers = len(Layer)
        if n_train % n_layers != 0:
            raise ConfigError(
                f"n_train={n_train} not divisible by layer count {n_layers}"
            )
        per_layer = n_train // n_layers
        train: list[int] = []
        for layer in Layer:
            layer_idx = [i for i, p in enumerate(params) if p.layer == layer]
            if per_layer >= len(layer_idx):
                raise ConfigError(
                    f"layer {layer.name} has only {len(layer_idx)} cases, "
                    f"cannot take {per_layer} for training"
                )
            order = rng.permutation(len(layer_idx))
            train.extend(layer_idx[j] for j in order[:per_layer])
    else:
        order = rng.permutation(total)
        train = [int(i) for i in order[:n_train]]
    train_set = set(train)
    test = tuple(i for i in range(total) if i not in train_set)
    return tuple(sorted(train)), test


def build_dataset(seed: int, grid: DOEGrid | None = None, n_train: int = 1500,
                  normalization: str = "global") -> StressDataset:
    """Enumerate, synthesize, normalize and split in one pass."""
    grid = grid or DOEGrid()
    params = enumerate_doe(grid)
    raw = np.empty((len(params), IMAGE_PIXELS), dtype=np.float64)
    layers = np.empty(len(params), dtype=np.int64)
    for i, p in enumerate(params):
        raw[i] = synthesize_stress_image(p).values.ravel()
        layers[i] = int(p.layer)
    normalized, info = normalize_images(raw, layers, normalization)
    train_idx, test_idx = split_train_test(params, n_train, seed)
    manifest = DatasetManifest(
        schema_version=DATASET_SCHEMA_VERSION,
        levels={k: tuple(v) for k, v in grid.levels.items()},
        normalization=normalization,
        global_min=info["global_min"],
        global_max=info["global_max"],
        layer_min=info["layer_min"],
        layer_max=info["layer_max"],
        train_indices=train_idx,
        test_indices=test_idx,
        seed=seed,
        surrogate={int(k): v for k, v in SURROGATE_CONSTANTS.items()},
    )
    return StressDataset(params, normalized, manifest)


def save_dataset(dataset: StressDataset, path) -> None:
    manifest = dataset.manifest.to_json_dict()
    manifest["kind"] = "dataset"
    write_container(path, manifest, {"images": dataset.images})


def load_dataset(path) -> StressDataset:
    header, blocks = read_container(
        path, expected_kind="dataset", expected_version=DATASET_SCHEMA_VERSION
    )
    manifest = DatasetManifest.from_json_dict(header)
    grid = DOEGrid(levels=dict(manifest.levels))
    params = enumerate_doe(grid)
    images = blocks.get("images")
    if images is None:
        raise DataIOError(f"{path}: missing images block")
    if images.shape != (len(params), IMAGE_PIXELS):
        raise DataIOError(
            f"{path}: images shape {images.shape} inconsistent with "
            f"{len(params)} enumerated cases"
        )
    return StressDataset(params, images, manifest)

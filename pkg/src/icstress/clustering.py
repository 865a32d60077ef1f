"""K-means over latent vectors and the cluster-pull loss term.

Lloyd's algorithm with deterministic tie breaking (nearest center ties go
to the lowest index) and deterministic empty-cluster repair (the point
farthest from its assigned center becomes the new singleton center).
The cluster-pull loss penalizes a latent code's squared distance to its
nearest center; the center is a constant in the backward pass, since
centers are refreshed by re-running K-means rather than by gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ValidationError

# Slack for the monotonic-objective assertion; Lloyd is exactly
# non-increasing in real arithmetic, this only absorbs float noise.
_OBJECTIVE_SLACK = 1e-9


@dataclass
class ClusterModel:
    centers: np.ndarray          # (k, d)
    assignments: np.ndarray      # (n,) center index per fitted latent
    objective: float             # sum of squared distances to assigned centers
    objective_trace: tuple[float, ...] = ()
    age: int = 0                 # training iterations since this fit


def _distances_sq(latents: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = latents[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(latents: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = _distances_sq(latents, centers)
    idx = np.argmin(d2, axis=1)  # first minimum wins: lowest center index
    obj = float(d2[np.arange(len(latents)), idx].sum())
    return idx, obj


def kmeans_fit(latents: np.ndarray, k: int, *, init_centers: np.ndarray | None = None,
               seed: int | np.random.Generator | None = None,
               max_lloyd_iters: int = 5) -> ClusterModel:
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2:
        raise ConfigError(f"latents must be (n, d), got shape {latents.shape}")
    n = len(latents)
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    if not np.isfinite(latents).all():
        raise ValidationError("non-finite latent vector passed to kmeans_fit")

    if init_centers is not None:
        centers = np.array(init_centers, dtype=np.float64)
        if centers.shape != (k, latents.shape[1]):
            raise ConfigError(
                f"init_centers shape {centers.shape} does not match "
                f"(k={k}, d={latents.shape[1]})"
            )
    else:
        if seed is None:
            raise ConfigError("kmeans_fit needs init_centers or a seed")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        picks = rng.choice(n, size=k, replace=False)
        centers = latents[picks].copy()

    idx, obj = _assign(latents, centers)
    trace = [obj]
    for _ in range(max_lloyd_iters):
        new_centers = np.empty_like(centers)
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, latents)
        nonempty = counts > 0
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            # Farthest point from its assigned center seeds each empty cluster.
            d2 = _distances_sq(latents, centers)
            own = d2[np.arange(n), idx].copy()
            for c in empties:
                j = int(np.argmax(own))
                new_centers[c] = latents[j]
                own[j] = -1.0  # a point seeds at most one cluster
        centers = new_centers
        new_idx, new_obj = _assign(latents, centers)
        if new_obj > trace[-1] + _OBJECTIVE_SLACK:
            raise ValidationError(
                f"kmeans objective increased: {trace[-1]} -> {new_obj}"
            )
        trace.append(new_obj)
        stable = bool(np.array_equal(new_idx, idx))
        idx, obj = new_idx, new_obj
        if stable:
            break
    return ClusterModel(
        centers=centers,
        assignments=idx,
        objective=obj,
        objective_trace=tuple(trace),
    )


def nearest_center(z: np.ndarray, model: ClusterModel) -> tuple[np.ndarray, int]:
    """Closest center to one latent vector; ties go to the lowest index."""
    if model.centers.size == 0:
        raise ConfigError("cluster model has no centers")
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != model.centers.shape[1]:
        raise ConfigError(
            f"latent dim {z.shape[1]} does not match centers dim {model.centers.shape[1]}"
        )
    idx, _ = _assign(z, model.centers)
    i = int(idx[0])
    return model.centers[i].copy(), i


def nearest_centers(latents: np.ndarray, model: ClusterModel
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Batch version: (matched centers, indices) for each row."""
    if model.centers.size == 0:
        raise ConfigError("cluster model has no centers")
    idx, _ = _assign(np.asarray(latents, dtype=np.float64), model.centers)
    return model.centers[idx], idx


def dc_loss(z: ad.Tensor, eta: np.ndarray) -> ad.Tensor:
    """0.5 * ||eta - z||^2 with eta held constant in the backward pass."""
    eta = np.asarray(eta, dtype=np.float64)
    if z.shape != eta.shape:
        raise ConfigError(f"dc_loss shape mismatch: z {z.shape} vs eta {eta.shape}")
    return ad.sq_err_loss(z, ad.constant(eta))

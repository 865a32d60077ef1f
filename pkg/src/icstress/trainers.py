"""The four training/prediction pipelines over one shared latent space.

Variants and their per-network loss routing:

    BD      image = decode(boundary(p)); only boundary and decoder move.
    AE_BD   adds the reconstruction path decode(encode(V)); the encoder
            trains on lam1*L1, the decoder on lam1*L1 + L3, the boundary
            on L3.
    DC_BD   adds the cluster-pull term on the encoder output; K-means is
            refreshed from all training latents every `kmeans_period`
            iterations (default every iteration, which dominates its cost).
    AE_KNN  trains encoder+decoder on L1 only, then predicts a test vector
            by decoding the stored latent of its nearest training vector
            in normalized parameter space (k=1, ties to the lowest case
            index).

Loss terms are per-sample means of 0.5 * sum-of-squares, so batch losses
and full-set losses are on the same scale. All randomness flows from the
config seed through separate named streams (weights / batching / k-means),
so runs are bit-reproducible and DC_BD with lam2=0 consumes exactly the
same batch stream as AE_BD.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .clustering import ClusterModel, dc_loss, kmeans_fit, nearest_centers
from .dataset import StressDataset
from .errors import ConfigError, ValidationError
from .networks import (
    DEFAULT_BOUNDARY_HIDDEN,
    DEFAULT_DECODER_HIDDEN,
    DEFAULT_ENCODER_HIDDEN,
    DEFAULT_LATENT_DIM,
    NetBundle,
)

REPORT_SCHEMA_VERSION = 1

VARIANTS = ("BD", "AE_BD", "DC_BD", "AE_KNN")

# Which parameter groups the optimizer may move, per variant.
UPDATE_MASKS = {
    "BD": ("decoder", "boundary"),
    "AE_BD": ("encoder", "decoder", "boundary"),
    "DC_BD": ("encoder", "decoder", "boundary"),
    "AE_KNN": ("encoder", "decoder"),
}


@dataclass(frozen=True)
class TrainConfig:
    variant: str
    lam1: float = 0.1
    lam2: float = 0.01
    k: int = 3
    total_iterations: int = 5000
    checkpoint_iterations: tuple[int, ...] = ()
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    kmeans_period: int = 1
    kmeans_max_iters: int = 5
    latent_dim: int = DEFAULT_LATENT_DIM
    encoder_hidden: tuple[int, ...] = DEFAULT_ENCODER_HIDDEN
    decoder_hidden: tuple[int, ...] = DEFAULT_DECODER_HIDDEN
    boundary_hidden: tuple[int, ...] = DEFAULT_BOUNDARY_HIDDEN
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid variants: {', '.join(VARIANTS)}"
            )
        if self.lam1 < 0 or self.lam2 < 0:
            raise ConfigError(f"lam1/lam2 must be >= 0, got {self.lam1}, {self.lam2}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.total_iterations < 0:
            raise ConfigError(f"total_iterations must be >= 0, got {self.total_iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.kmeans_period < 1:
            raise ConfigError(f"kmeans_period must be >= 1, got {self.kmeans_period}")
        bad = [c for c in self.checkpoint_iterations
               if not 1 <= c <= self.total_iterations]
        if bad:
            raise ConfigError(
                f"checkpoint iterations {bad} outside [1, {self.total_iterations}]"
            )
        return self

    def snapshot(self) -> dict:
        d = asdict(self)
        for key in ("checkpoint_iterations", "encoder_hidden", "decoder_hidden",
                    "boundary_hidden"):
            d[key] = list(d[key])
        return d


@dataclass
class CheckpointRecord:
    iteration: int
    train_ssd: float | None   # None for AE_KNN, which has no train-side entry
    test_ssd: float
    loss_total: float
    loss_l1: float
    loss_l2: float
    loss_l3: float
    wall_seconds: float       # cumulative training-loop seconds
    cluster_seconds: float    # cumulative K-means refresh seconds


@dataclass
class TrainReport:
    variant: str
    seed: int
    config: dict
    records: list[CheckpointRecord]
    batch_losses: list[float] = field(default_factory=list)
    train_seconds: float = 0.0
    cluster_seconds: float = 0.0
    kmeans_recomputes: int = 0

    def __post_init__(self):
        iters = [r.iteration for r in self.records]
        if iters != sorted(iters):
            raise ValidationError("checkpoint records out of ascending order")
        for r in self.records:
            vals = [r.test_ssd, r.loss_total, r.loss_l1, r.loss_l2, r.loss_l3]
            if r.train_ssd is not None:
                vals.append(r.train_ssd)
            if not np.isfinite(vals).all():
                raise ValidationError(f"non-finite value in checkpoint {r.iteration}")

    def final_record(self) -> CheckpointRecord:
        return self.records[-1]


@dataclass
class LatentStore:
    """Frozen training latents aligned with their parameter vectors."""

    case_indices: np.ndarray  # (m,) dataset case ids, ascending
    vec_train: np.ndarray     # (m, 5) normalized parameters
    latent_train: np.ndarray  # (m, latent_dim)

    def __post_init__(self):
        m = len(self.case_indices)
        if len(self.vec_train) != m or len(self.latent_train) != m:
            raise ConfigError(
                "latent store misaligned: "
                f"{m} cases, {len(self.vec_train)} vectors, {len(self.latent_train)} latents"
            )


def composite_loss(p_norm: np.ndarray, images: np.ndarray, bundle: NetBundle,
                   cluster_model: ClusterModel | None, config: TrainConfig
                   ) -> tuple[ad.Tensor, dict[str, float]]:
    """Build the variant's loss graph; returns (total, per-term values).

    Terms are per-sample means. Inactive terms are reported as 0.0.
    """
    variant = config.variant
    if (variant == "DC_BD") != (cluster_model is not None):
        if cluster_model is None:
            raise ConfigError("DC_BD needs a cluster model")
        raise ConfigError(f"variant {variant} does not take a cluster model")
    n = len(images)
    inv_n = 1.0 / n
    targets = ad.constant(images)
    l1 = l2 = l3 = None
    if variant in ("AE_BD", "DC_BD", "AE_KNN"):
        z = bundle.encode(targets)
        recon = bundle.decode(z)
        l1 = ad.sq_err_loss(recon, targets) * inv_n
        if variant == "DC_BD":
            eta, _ = nearest_centers(z.data, cluster_model)
            l2 = ad.sq_err_loss(z, ad.constant(eta)) * inv_n
    if variant != "AE_KNN":
        y = bundle.decode(bundle.boundary_map(ad.constant(p_norm)))
        l3 = ad.sq_err_loss(y, targets) * inv_n

    if variant == "BD":
        total = l3
    elif variant == "AE_BD":
        total = l1 * config.lam1 + l3
    elif variant == "DC_BD":
        total = l1 * config.lam1 + l2 * config.lam2 + l3
    else:  # AE_KNN
        total = l1
    terms = {
        "l1": l1.item() if l1 is not None else 0.0,
        "l2": l2.item() if l2 is not None else 0.0,
        "l3": l3.item() if l3 is not None else 0.0,
    }
    return total, terms


def _step(p_norm: np.ndarray, images: np.ndarray, bundle: NetBundle,
          state: ad.AdamState, config: TrainConfig,
          cluster_model: ClusterModel | None = None) -> dict[str, float]:
    total, terms = composite_loss(p_norm, images, bundle, cluster_model, config)
    ad.backward(total)
    ad.adam_step(bundle.store, state, UPDATE_MASKS[config.variant])
    terms["total"] = total.item()
    return terms


def train_step_bd(batch, bundle: NetBundle, state: ad.AdamState,
                  config: TrainConfig) -> dict[str, float]:
    p_norm, images = batch
    return _step(p_norm, images, bundle, state, config)


def train_step_ae_bd(batch, bundle: NetBundle, state: ad.AdamState,
                     config: TrainConfig) -> dict[str, float]:
    p_norm, images = batch
    return _step(p_norm, images, bundle, state, config)


def train_step_dc_bd(batch, bundle: NetBundle, cluster_model: ClusterModel,
                     state: ad.AdamState, config: TrainConfig) -> dict[str, float]:
    if cluster_model is None:
        raise ConfigError("DC_BD needs a cluster model")
    if cluster_model.age >= config.kmeans_period:
        raise ValidationError(
            f"stale cluster model: age {cluster_model.age} >= "
            f"recompute period {config.kmeans_period}"
        )
    p_norm, images = batch
    return _step(p_norm, images, bundle, state, config, cluster_model)


def train_step_ae(batch, bundle: NetBundle, state: ad.AdamState,
                  config: TrainConfig) -> dict[str, float]:
    p_norm, images = batch
    return _step(p_norm, images, bundle, state, config)


_STEP_FNS = {
    "BD": train_step_bd,
    "AE_BD": train_step_ae_bd,
    "AE_KNN": train_step_ae,
}


class _Batcher:
    """Seeded without-replacement shuffling, reshuffled each epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos >= len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def knn_lookup(vec_test: np.ndarray, store: LatentStore) -> tuple[np.ndarray, np.ndarray]:
    """Nearest training vector per query row; returns (latents, store rows)."""
    if len(store.vec_train) == 0:
        raise ConfigError("empty latent store")
    queries = np.atleast_2d(np.asarray(vec_test, dtype=np.float64))
    diff = queries[:, None, :] - store.vec_train[None, :, :]
    d2 = np.einsum("qmd,qmd->qm", diff, diff)
    rows = np.argmin(d2, axis=1)  # first minimum: lowest case index
    return store.latent_train[rows], rows


def ae_knn_predict(vec_test: np.ndarray, store: LatentStore,
                   bundle: NetBundle) -> np.ndarray:
    """Decode the stored latent of the nearest training vector. Pure lookup
    plus a forward pass; no gradients anywhere."""
    latents, _ = knn_lookup(vec_test, store)
    out = bundle.decode_np(latents)
    return out[0] if np.asarray(vec_test).ndim == 1 else out


def build_latent_store(bundle: NetBundle, dataset: StressDataset) -> LatentStore:
    idx = np.asarray(dataset.manifest.train_indices, dtype=np.int64)
    vec, images = dataset.train_arrays()
    return LatentStore(
        case_indices=idx,
        vec_train=vec,
        latent_train=bundle.encode_np(images),
    )


def _mean_pixel_ssd(pred: np.ndarray, truth: np.ndarray) -> float:
    diff = pred - truth
    return float(np.einsum("np,np->n", diff, diff).mean() / truth.shape[1])


class Trainer:
    """Owns one training run: nets, optimizer, batching, cluster refresh."""

    def __init__(self, dataset: StressDataset, config: TrainConfig):
        config.validate()
        self.dataset = dataset
        self.config = config
        self.bundle = NetBundle(
            seed=config.seed,
            latent_dim=config.latent_dim,
            image_pixels=dataset.images.shape[1],
            encoder_hidden=config.encoder_hidden,
            decoder_hidden=config.decoder_hidden,
            boundary_hidden=config.boundary_hidden,
        )
        self.state = ad.AdamState(
            lr=config.learning_rate, beta1=config.adam_beta1,
            beta2=config.adam_beta2, eps=config.adam_eps,
        )
        self.p_train, self.t_train = dataset.train_arrays()
        self.p_test, self.t_test = dataset.test_arrays()
        # Separate streams so k-means never perturbs batch order.
        self.batch_rng = np.random.default_rng([config.seed, 1])
        self.kmeans_rng = np.random.default_rng([config.seed, 2])
        self.batcher = _Batcher(len(self.t_train), config.batch_size, self.batch_rng)
        self.cluster_model: ClusterModel | None = None
        self.cluster_seconds = 0.0
        self.kmeans_recomputes = 0

    def refresh_clusters(self) -> None:
        t0 = time.perf_counter()
        latents = self.bundle.encode_np(self.t_train)
        init = self.cluster_model.centers if self.cluster_model is not None else None
        self.cluster_model = kmeans_fit(
            latents, self.config.k,
            init_centers=init,
            seed=self.kmeans_rng if init is None else None,
            max_lloyd_iters=self.config.kmeans_max_iters,
        )
        self.cluster_seconds += time.perf_counter() - t0

    def evaluate(self, iteration: int, wall_seconds: float) -> CheckpointRecord:
        cfg = self.config
        if cfg.variant == "AE_KNN":
            store = build_latent_store(self.bundle, self.dataset)
            latents, _ = knn_lookup(self.p_test, store)
            pred_test = self.bundle.decode_np(latents)
            train_ssd = None
        else:
            pred_train = self.bundle.predict_np(self.p_train)
            pred_test = self.bundle.predict_np(self.p_test)
            train_ssd = _mean_pixel_ssd(pred_train, self.t_train)
        test_ssd = _mean_pixel_ssd(pred_test, self.t_test)
        terms = self._full_train_losses()
        return CheckpointRecord(
            iteration=iteration,
            train_ssd=train_ssd,
            test_ssd=test_ssd,
            loss_total=terms["total"],
            loss_l1=terms["l1"],
            loss_l2=terms["l2"],
            loss_l3=terms["l3"],
            wall_seconds=wall_seconds,
            cluster_seconds=self.cluster_seconds,
        )

    def _full_train_losses(self) -> dict[str, float]:
        # Gradient-free evaluation of the variant's loss terms on the
        # whole training set; mirrors composite_loss term for term.
        cfg = self.config
        n = len(self.t_train)
        terms = {"l1": 0.0, "l2": 0.0, "l3": 0.0}
        if cfg.variant in ("AE_BD", "DC_BD", "AE_KNN"):
            z = self.bundle.encode_np(self.t_train)
            recon = self.bundle.decode_np(z)
            terms["l1"] = 0.5 * float(((recon - self.t_train) ** 2).sum()) / n
            if cfg.variant == "DC_BD":
                eta, _ = nearest_centers(z, self.cluster_model)
                terms["l2"] = 0.5 * float(((eta - z) ** 2).sum()) / n
        if cfg.variant != "AE_KNN":
            pred = self.bundle.predict_np(self.p_train)
            terms["l3"] = 0.5 * float(((pred - self.t_train) ** 2).sum()) / n
        if cfg.variant == "BD":
            terms["total"] = terms["l3"]
        elif cfg.variant == "AE_BD":
            terms["total"] = cfg.lam1 * terms["l1"] + terms["l3"]
        elif cfg.variant == "DC_BD":
            terms["total"] = (cfg.lam1 * terms["l1"] + cfg.lam2 * terms["l2"]
                              + terms["l3"])
        else:
            terms["total"] = terms["l1"]
        return terms

    def run(self, checkpoint_callback=None) -> TrainReport:
        cfg = self.config
        checkpoints = set(cfg.checkpoint_iterations)
        records: list[CheckpointRecord] = []
        batch_losses: list[float] = []
        last_fit_iteration: int | None = None
        if cfg.variant == "DC_BD":
            # Initial fit serves both the iteration-0 evaluation and the
            # first training iteration; later refreshes warm-start from it.
            self.refresh_clusters()
            self.kmeans_recomputes += 1
            last_fit_iteration = 1
        records.append(self.evaluate(0, 0.0))
        wall = 0.0
        for it in range(1, cfg.total_iterations + 1):
            t0 = time.perf_counter()
            if cfg.variant == "DC_BD":
                if it - last_fit_iteration >= cfg.kmeans_period:
                    self.refresh_clusters()
                    self.kmeans_recomputes += 1
                    last_fit_iteration = it
                self.cluster_model.age = it - last_fit_iteration
                batch = self.batcher.next_batch()
                terms = train_step_dc_bd(
                    (self.p_train[batch], self.t_train[batch]),
                    self.bundle, self.cluster_model, self.state, cfg,
                )
            else:
                batch = self.batcher.next_batch()
                terms = _STEP_FNS[cfg.variant](
                    (self.p_train[batch], self.t_train[batch]),
                    self.bundle, self.state, cfg,
                )
            wall += time.perf_counter() - t0
            batch_losses.append(terms["total"])
            if it in checkpoints:
                record = self.evaluate(it, wall)
                records.append(record)
                if checkpoint_callback is not None:
                    checkpoint_callback(it, self.bundle, self)
        return TrainReport(
            variant=cfg.variant,
            seed=cfg.seed,
            config=cfg.snapshot(),
            records=records,
            batch_losses=batch_losses,
            train_seconds=wall,
            cluster_seconds=self.cluster_seconds,
            kmeans_recomputes=self.kmeans_recomputes,
        )


def run_training(dataset: StressDataset, config: TrainConfig,
                 checkpoint_callback=None) -> TrainReport:
    """Train one variant to completion; see Trainer for the mechanics."""
    return Trainer(dataset, config).run(checkpoint_callback)


def ae_knn_fit(dataset: StressDataset, config: TrainConfig
               ) -> tuple[NetBundle, LatentStore, TrainReport]:
    """Train the autoencoder, then freeze training latents for lookup."""
    if config.variant != "AE_KNN":
        raise ConfigError(f"ae_knn_fit expects variant AE_KNN, got {config.variant!r}")
    trainer = Trainer(dataset, config)
    report = trainer.run()
    store = build_latent_store(trainer.bundle, dataset)
    return trainer.bundle, store, report


def report_to_dict(report: TrainReport, include_timing: bool = False) -> dict:
    """JSON-ready form; timing is split out so the deterministic part can
    be byte-compared across identical runs."""
    d = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "train_report",
        "variant": report.variant,
        "seed": report.seed,
        "config": report.config,
        "kmeans_recomputes": report.kmeans_recomputes,
        "checkpoints": [
            {
                "iteration": r.iteration,
                "train_ssd": r.train_ssd,
                "test_ssd": r.test_ssd,
                "loss_total": r.loss_total,
                "loss_l1": r.loss_l1,
                "loss_l2": r.loss_l2,
                "loss_l3": r.loss_l3,
            }
            for r in report.records
        ],
        "batch_losses": report.batch_losses,
    }
    if include_timing:
        d["timing"] = timing_to_dict(report)
    return d


def timing_to_dict(report: TrainReport) -> dict:
    return {
        "variant": report.variant,
        "seed": report.seed,
        "train_seconds": report.train_seconds,
        "cluster_seconds": report.cluster_seconds,
        "checkpoint_wall_seconds": [r.wall_seconds for r in report.records],
        "checkpoint_cluster_seconds": [r.cluster_seconds for r in report.records],
    }


def report_from_dict(d: dict) -> TrainReport:
    if d.get("kind") != "train_report":
        raise ValidationError(f"not a train report: kind={d.get('kind')!r}")
    if d.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValidationError(
            f"report schema version mismatch: {d.get('schema_version')}"
        )
    timing = d.get("timing", {})
    walls = timing.get("checkpoint_wall_seconds")
    clusters = timing.get("checkpoint_cluster_seconds")
    records = []
    for i, c in enumerate(d["checkpoints"]):
        records.append(CheckpointRecord(
            iteration=int(c["iteration"]),
            train_ssd=None if c["train_ssd"] is None else float(c["train_ssd"]),
            test_ssd=float(c["test_ssd"]),
            loss_total=float(c["loss_total"]),
            loss_l1=float(c["loss_l1"]),
            loss_l2=float(c["loss_l2"]),
            loss_l3=float(c["loss_l3"]),
            wall_seconds=float(walls[i]) if walls else 0.0,
            cluster_seconds=float(clusters[i]) if clusters else 0.0,
        ))
    return TrainReport(
        variant=d["variant"],
        seed=int(d["seed"]),
        config=dict(d["config"]),
        records=records,
        batch_losses=[float(x) for x in d.get("batch_losses", [])],
        train_seconds=float(timing.get("train_seconds", 0.0)),
        cluster_seconds=float(timing.get("cluster_seconds", 0.0)),
        kmeans_recomputes=int(d.get("kmeans_recomputes", 0)),
    )

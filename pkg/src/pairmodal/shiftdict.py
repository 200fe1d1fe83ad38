"""Shift vector dictionary: cluster pretrained features per modality, fit
per-cluster Gaussians, and pre-sample the shift vectors used as feature-space
augmentation during fine-tuning. Includes the binary dictionary file format.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, STAGE_PRETRAIN, require_stage, restore_model
from .data import MODALITIES, PairedSample
from .fileio import atomic_write_bytes
from .pretraining import images_tensor

SVD_MAGIC = b"MICSSVD1"

_KMEANS_STREAM = 301
_SAMPLE_STREAM = 302
_BUILD_STREAM = 303

NULL_HASH = "0" * 64


class ShiftDictError(ValueError):
    """Raised for invalid clustering inputs or malformed dictionary files."""


@dataclass(frozen=True)
class SvdConfig:
    vectors_per_cluster: int = 64
    shrinkage: float = 1e-4
    kmeans_max_iter: int = 100
    kmeans_tol: float = 1e-9
    kmeans_restarts: int = 10
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.vectors_per_cluster < 1:
            raise ShiftDictError("vectors_per_cluster must be >= 1")
        if self.shrinkage < 0:
            raise ShiftDictError("shrinkage must be non-negative")
        if self.kmeans_max_iter < 1 or self.kmeans_tol < 0:
            raise ShiftDictError("kmeans_max_iter must be >= 1 and kmeans_tol non-negative")
        if self.kmeans_restarts < 1:
            raise ShiftDictError("kmeans_restarts must be >= 1")


# ---------------------------------------------------------------------------
# K-means.
# ---------------------------------------------------------------------------


def kmeans_objective(
    points: np.ndarray, prototypes: np.ndarray, assignment: np.ndarray
) -> float:
    return float(((points - prototypes[assignment]) ** 2).sum())


def _squared_distances(points: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - prototypes[None, :, :]
    return (diff**2).sum(axis=2)


def _plus_plus_init(
    points: np.ndarray, num_clusters: int, rng: np.random.Generator
) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    for _ in range(num_clusters - 1):
        d2 = _squared_distances(points, points[chosen]).min(axis=1)
        total = d2.sum()
        if total <= 0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
    return points[chosen].copy()


def _lloyd(
    points: np.ndarray,
    num_clusters: int,
    rng: np.random.Generator,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    n = points.shape[0]
    prototypes = _plus_plus_init(points, num_clusters, rng)
    history: list[float] = []
    for _ in range(max_iter):
        d2 = _squared_distances(points, prototypes)
        assignment = d2.argmin(axis=1)
        for c in range(num_clusters):
            if not (assignment == c).any():
                own_d2 = d2[np.arange(n), assignment]
                farthest = int(own_d2.argmax())
                prototypes[c] = points[farthest]
                assignment[farthest] = c
                d2 = _squared_distances(points, prototypes)
        new_prototypes = prototypes.copy()
        for c in range(num_clusters):
            members = assignment == c
            if members.any():
                new_prototypes[c] = points[members].mean(axis=0)
        movement = float(np.abs(new_prototypes - prototypes).max())
        prototypes = new_prototypes
        history.append(kmeans_objective(points, prototypes, assignment))
        if movement < tol:
            break
    assignment = _squared_distances(points, prototypes).argmin(axis=1)
    return prototypes, assignment, history


def kmeans(
    points: np.ndarray,
    num_clusters: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-9,
    restarts: int = 10,
    return_history: bool = False,
):
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    Ties in assignment go to the lowest prototype index. A cluster left
    empty by an assignment pass is re-seeded to the point farthest from its
    currently assigned prototype before the mean update, which keeps the
    objective non-increasing within a run. All restarts draw from one seeded
    stream, and the run with the lowest final objective wins (earliest on
    ties). Returns (prototypes, assignment), with the assignment consistent
    with the returned prototypes; ``return_history`` appends the winning
    run's per-iteration objective values.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShiftDictError(f"points must be 2-D, got shape {points.shape}")
    if not np.isfinite(points).all():
        raise ShiftDictError("points contain non-finite values")
    n = points.shape[0]
    if num_clusters < 1:
        raise ShiftDictError(f"num_clusters must be >= 1, got {num_clusters}")
    if n < num_clusters:
        raise ShiftDictError(f"cannot form {num_clusters} clusters from {n} points")
    if restarts < 1:
        raise ShiftDictError(f"restarts must be >= 1, got {restarts}")

    rng = np.random.default_rng([_KMEANS_STREAM, seed])
    best: Optional[tuple[float, np.ndarray, np.ndarray, list[float]]] = None
    for _ in range(restarts):
        prototypes, assignment, history = _lloyd(points, num_clusters, rng, max_iter, tol)
        objective = kmeans_objective(points, prototypes, assignment)
        if best is None or objective < best[0]:
            best = (objective, prototypes, assignment, history)
    _, prototypes, assignment, history = best
    if return_history:
        return prototypes, assignment, history
    return prototypes, assignment


# ---------------------------------------------------------------------------
# Per-cluster Gaussians and shift sampling.
# ---------------------------------------------------------------------------


def shrunk_covariance(members: np.ndarray, shrinkage: float) -> np.ndarray:
    """Unbiased covariance plus relative diagonal shrinkage.

    The shrinkage term adds shrinkage * trace(Sigma)/D to the diagonal.
    Fewer than two members yield the zero matrix (plus zero shrinkage).
    """
    members = np.asarray(members, dtype=np.float64)
    dim = members.shape[1]
    if members.shape[0] < 2:
        return np.zeros((dim, dim))
    sigma = np.cov(members, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    return sigma + shrinkage * (np.trace(sigma) / dim) * np.eye(dim)


def sample_shift_vectors(
    mu: np.ndarray, sigma: np.ndarray, count: int, seed: int = 0
) -> np.ndarray:
    """Draw ``count`` Gaussian vectors via the Cholesky factor of sigma.

    An exactly zero covariance degenerates to copies of the mean; any other
    non-positive-definite covariance is an error.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if count < 1:
        raise ShiftDictError(f"count must be >= 1, got {count}")
    if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
        raise ShiftDictError(
            f"mean shape {mu.shape} and covariance shape {sigma.shape} do not match"
        )
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise ShiftDictError("covariance must be symmetric")
    if not sigma.any():
        return np.tile(mu, (count, 1))
    try:
        factor = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ShiftDictError(
            "covariance is not positive definite; increase shrinkage"
        ) from exc
    gaussian = np.random.default_rng([_SAMPLE_STREAM, seed]).standard_normal((count, mu.size))
    return mu + gaussian @ factor.T


# ---------------------------------------------------------------------------
# Dictionary container, build, and file format.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShiftVectorDictionary:
    """Per-modality cluster prototypes and pre-sampled shift vectors."""

    prototypes: dict[str, np.ndarray]
    shifts: dict[str, np.ndarray]
    build_seed: int
    checkpoint_hash: str = NULL_HASH

    def __post_init__(self) -> None:
        if tuple(self.prototypes) != MODALITIES or tuple(self.shifts) != MODALITIES:
            raise ShiftDictError(f"dictionary must cover modalities {MODALITIES}")
        c, d = self.prototypes[MODALITIES[0]].shape
        p = self.shifts[MODALITIES[0]].shape[1]
        for modality in MODALITIES:
            if self.prototypes[modality].shape != (c, d):
                raise ShiftDictError("prototype shapes differ across modalities")
            if self.shifts[modality].shape != (c, p, d):
                raise ShiftDictError("shift shapes do not match prototypes")
            if (
                self.prototypes[modality].dtype != np.float32
                or self.shifts[modality].dtype != np.float32
            ):
                raise ShiftDictError("dictionary arrays must be float32")
        if len(self.checkpoint_hash) != 64:
            raise ShiftDictError("checkpoint hash must be 64 hex characters")

    @property
    def num_clusters(self) -> int:
        return self.prototypes[MODALITIES[0]].shape[0]

    @property
    def vectors_per_cluster(self) -> int:
        return self.shifts[MODALITIES[0]].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.prototypes[MODALITIES[0]].shape[1]


def extract_features(
    ckpt: Checkpoint,
    samples: Sequence[PairedSample],
    modality: str,
    batch_size: int = 64,
) -> np.ndarray:
    """Pooled encoder features for one modality from a pretraining checkpoint."""
    require_stage(ckpt, STAGE_PRETRAIN)
    if modality not in MODALITIES:
        raise ShiftDictError(f"unknown modality {modality!r}")
    if not samples:
        raise ShiftDictError("no samples to extract features from")
    model = restore_model(ckpt)
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = samples[start : start + batch_size]
            pooled, _ = model.encode(images_tensor(batch, modality), modality)
            chunks.append(pooled.numpy())
    return np.concatenate(chunks).astype(np.float32)


def build_shift_dictionary(
    ckpt: Checkpoint,
    samples: Sequence[PairedSample],
    config: SvdConfig,
    seed: int = 0,
    checkpoint_hash: str = NULL_HASH,
) -> ShiftVectorDictionary:
    """Cluster features of both modalities and pre-sample shift vectors.

    The cluster count equals the checkpoint's class count. A cluster with
    no members after the final assignment, or a single member, contributes
    zero covariance, so its shift vectors all equal its center.
    """
    num_clusters = ckpt.net_config.num_classes
    master = np.random.default_rng([_BUILD_STREAM, seed])
    kmeans_seeds = master.integers(0, 2**31, size=len(MODALITIES))
    draw_seeds = master.integers(0, 2**31, size=(len(MODALITIES), num_clusters))

    prototypes: dict[str, np.ndarray] = {}
    shifts: dict[str, np.ndarray] = {}
    for m_index, modality in enumerate(MODALITIES):
        features = extract_features(ckpt, samples, modality, config.batch_size).astype(np.float64)
        protos, assignment = kmeans(
            features,
            num_clusters,
            seed=int(kmeans_seeds[m_index]),
            max_iter=config.kmeans_max_iter,
            tol=config.kmeans_tol,
            restarts=config.kmeans_restarts,
        )
        cluster_shifts = np.empty(
            (num_clusters, config.vectors_per_cluster, features.shape[1])
        )
        for c in range(num_clusters):
            members = features[assignment == c]
            center = members.mean(axis=0) if len(members) else protos[c]
            sigma = shrunk_covariance(members, config.shrinkage)
            cluster_shifts[c] = sample_shift_vectors(
                center, sigma, config.vectors_per_cluster, seed=int(draw_seeds[m_index, c])
            )
        prototypes[modality] = protos.astype(np.float32)
        shifts[modality] = cluster_shifts.astype(np.float32)
    return ShiftVectorDictionary(
        prototypes=prototypes,
        shifts=shifts,
        build_seed=seed,
        checkpoint_hash=checkpoint_hash,
    )


def draw_shift(
    svd: ShiftVectorDictionary,
    rng: np.random.Generator,
    centered: bool = False,
    count: Optional[int] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniformly pick (cluster, vector) per modality; optionally per sample.

    ``centered`` subtracts the owning cluster's prototype from each vector.
    With ``count`` given, returns (count, D) arrays instead of (D,).
    """
    draws = count if count is not None else 1
    if draws < 1:
        raise ShiftDictError(f"count must be >= 1, got {count}")
    out = []
    for modality in MODALITIES:
        clusters = rng.integers(0, svd.num_clusters, size=draws)
        vectors = rng.integers(0, svd.vectors_per_cluster, size=draws)
        picked = svd.shifts[modality][clusters, vectors].astype(np.float32)
        if centered:
            picked = picked - svd.prototypes[modality][clusters]
        out.append(picked if count is not None else picked[0])
    return out[0], out[1]


def svd_bytes(svd: ShiftVectorDictionary) -> bytes:
    parts = [
        SVD_MAGIC,
        np.uint32(len(MODALITIES)).tobytes(),
        np.uint32(svd.num_clusters).tobytes(),
        np.uint32(svd.vectors_per_cluster).tobytes(),
        np.uint32(svd.feature_dim).tobytes(),
        np.int64(svd.build_seed).tobytes(),
        bytes.fromhex(svd.checkpoint_hash),
    ]
    for modality in MODALITIES:
        parts.append(np.ascontiguousarray(svd.prototypes[modality], dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(svd.shifts[modality], dtype="<f4").tobytes())
    return b"".join(parts)


def save_svd(path: Path | str, svd: ShiftVectorDictionary) -> None:
    atomic_write_bytes(path, svd_bytes(svd))


def load_svd(path: Path | str) -> ShiftVectorDictionary:
    data = Path(path).read_bytes()
    if data[: len(SVD_MAGIC)] != SVD_MAGIC:
        raise ShiftDictError(f"{path}: not a shift dictionary file (bad magic)")
    offset = len(SVD_MAGIC)
    modality_count, num_clusters, per_cluster, dim = np.frombuffer(
        data, dtype="<u4", count=4, offset=offset
    )
    offset += 16
    build_seed = int(np.frombuffer(data, dtype="<i8", count=1, offset=offset)[0])
    offset += 8
    checkpoint_hash = data[offset : offset + 32].hex()
    offset += 32
    if modality_count != len(MODALITIES):
        raise ShiftDictError(f"{path}: expected {len(MODALITIES)} modalities, got {modality_count}")
    prototypes = {}
    shifts = {}
    for modality in MODALITIES:
        n_proto = int(num_clusters) * int(dim)
        prototypes[modality] = (
            np.frombuffer(data, dtype="<f4", count=n_proto, offset=offset)
            .reshape(int(num_clusters), int(dim))
            .copy()
        )
        offset += n_proto * 4
        n_shift = int(num_clusters) * int(per_cluster) * int(dim)
        shifts[modality] = (
            np.frombuffer(data, dtype="<f4", count=n_shift, offset=offset)
            .reshape(int(num_clusters), int(per_cluster), int(dim))
            .copy()
        )
        offset += n_shift * 4
    if offset != len(data):
        raise ShiftDictError(f"{path}: trailing bytes after shift payload")
    return ShiftVectorDictionary(
        prototypes=prototypes,
        shifts=shifts,
        build_seed=build_seed,
        checkpoint_hash=checkpoint_hash,
    )

"""KV shareability studies and router diagnostics.

All studies operate on lists of per-user ``n x d`` key (or value) matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import PredictionBatch, SequenceBatch, evaluate_predictions
from .cachesim import CacheEntry
from .errors import ShapeError, UsageError
from .numkit import kde_density, kde_grid, svd


@dataclass(frozen=True)
class SimilaritySample:
    user_a: str
    user_b: str
    cosine: float
    variant: str = "mean"   # mean | principal | residual
    target: str = "key"     # key | value


@dataclass
class SimilarityStudy:
    samples: list[SimilaritySample]
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    skipped: int = 0

    @property
    def values(self) -> np.ndarray:
        return np.array([s.cosine for s in self.samples])

    def summary(self) -> dict:
        v = self.values
        return {
            "count": int(v.size),
            "median": float(np.median(v)),
            "mean": float(np.mean(v)),
            "std": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
            "positive_fraction": float(np.mean(v > 0)),
            "abs_gt_half_fraction": float(np.mean(np.abs(v) > 0.5)),
            "skipped": self.skipped,
        }


def mean_kv(K: np.ndarray) -> np.ndarray:
    """Column means of an ``n x d`` matrix (returned as a length-d vector)."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] == 0:
        raise UsageError(f"mean_kv needs a non-empty n x d matrix, got shape {K.shape}")
    return K.mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _study(vectors: Sequence[np.ndarray], ids: Sequence[str], anchors: Sequence[int], variant: str,
           target: str, grid_points: int) -> SimilarityStudy:
    samples = []
    skipped = 0
    for a in anchors:
        for j in range(len(vectors)):
            if j == a:
                continue
            c = cosine(vectors[a], vectors[j])
            if c is None:
                skipped += 1
                continue
            samples.append(SimilaritySample(ids[a], ids[j], c, variant, target))
    values = [s.cosine for s in samples]
    if len(values) >= 2:
        grid, h = kde_grid(values, points=grid_points)
        density = kde_density(values, grid, h)
    else:
        grid, h, density = np.zeros(0), float("nan"), np.zeros(0)
    return SimilarityStudy(samples, grid, density, h, skipped)


def _anchor_list(anchor, n_users: int) -> list[int]:
    anchors = [anchor] if isinstance(anchor, (int, np.integer)) else list(anchor)
    for a in anchors:
        if not 0 <= a < n_users:
            raise UsageError(f"anchor {a} outside [0, {n_users})")
    return anchors


def cross_user_similarity(users: Sequence[np.ndarray], anchor=0, ids: Optional[Sequence[str]] = None,
                          target: str = "key", grid_points: int = 256) -> SimilarityStudy:
    """Cosine of each user's mean K (or V) against the anchor user(s), plus a KDE.

    ``anchor`` may be one index or a list; samples from several anchors are
    pooled. Pairs involving a zero mean vector are skipped and counted.
    """
    if len(users) < 2:
        raise UsageError("cross-user similarity needs at least 2 users")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(users))]
    means = [mean_kv(K) for K in users]
    return _study(means, ids, _anchor_list(anchor, len(users)), "mean", target, grid_points)


def principal_residual_split(K: np.ndarray, k: int):
    """Project K onto its top-k right singular directions and the remainder.

    Returns ``(K_p, K_r, retained_fraction)``.
    """
    K = np.asarray(K, dtype=np.float64)
    n, d = K.shape
    if n < d:
        raise ShapeError(f"principal/residual split needs n >= d, got {K.shape}")
    if not 1 <= k < d:
        raise UsageError(f"k must be in [1, {d - 1}], got {k}")
    res = svd(K)
    V = res.right_vectors
    energy = res.singular_values ** 2
    total = energy.sum()
    retained = float(energy[:k].sum() / total) if total > 0 else 1.0
    return K @ V[:, :k], K @ V[:, k:], retained


@dataclass
class SplitStudy:
    principal: SimilarityStudy
    residual: SimilarityStudy
    retained: np.ndarray

    def summary(self) -> dict:
        p, r = self.principal.summary(), self.residual.summary()
        return {
            "pairs": p["count"],
            "retained_mean": float(self.retained.mean()),
            "retained_min": float(self.retained.min()),
            "principal_std": p["std"],
            "residual_std": r["std"],
            "principal_abs_gt_half": p["abs_gt_half_fraction"],
            "residual_abs_gt_half": r["abs_gt_half_fraction"],
        }


def split_similarity_study(users: Sequence[np.ndarray], k: int, anchor=0, ids: Optional[Sequence[str]] = None,
                           target: str = "key", grid_points: int = 256) -> SplitStudy:
    """Cross-user similarity of mean principal vs mean residual K, each user in
    its own singular basis."""
    if len(users) < 2:
        raise UsageError("split similarity needs at least 2 users")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(users))]
    principal, residual, retained = [], [], []
    for K in users:
        K_p, K_r, frac = principal_residual_split(K, k)
        principal.append(K_p.mean(axis=0))
        residual.append(K_r.mean(axis=0))
        retained.append(frac)
    anchors = _anchor_list(anchor, len(users))
    return SplitStudy(_study(principal, ids, anchors, "principal", target, grid_points),
                      _study(residual, ids, anchors, "residual", target, grid_points),
                      np.array(retained))


# ---------------------------------------------------------------------------
# Router diagnostics

@dataclass
class ActivationHistogram:
    bin_size: int
    pool_size: int
    counts: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return np.arange(0, self.counts.size + 1) * self.bin_size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def max_share(self) -> float:
        return float(self.counts.max() / self.total) if self.total else 0.0


def _entry_indices(entry: CacheEntry, which: str) -> np.ndarray:
    if which == "k":
        return entry.I_k
    if which == "v":
        return entry.I_v
    if which == "both":
        return np.concatenate([entry.I_k, entry.I_v])
    raise UsageError(f"which must be 'k', 'v' or 'both', got {which!r}")


def activation_histogram(entries: Sequence[CacheEntry], bin_size: int, pool_size: int,
                         which: str = "k") -> ActivationHistogram:
    if bin_size < 1:
        raise UsageError("bin_size must be >= 1")
    n_bins = math.ceil(pool_size / bin_size)
    counts = np.zeros(n_bins, dtype=np.int64)
    for e in entries:
        idx = _entry_indices(e, which)
        if idx.size:
            counts += np.bincount(idx // bin_size, minlength=n_bins)[:n_bins]
    return ActivationHistogram(bin_size, pool_size, counts)


def overlap_ratio(entry_a: CacheEntry, entry_b: CacheEntry, which: str = "k") -> float:
    """Shared activated pool rows over the smaller of the two activated sets."""
    a = np.unique(_entry_indices(entry_a, which))
    b = np.unique(_entry_indices(entry_b, which))
    if a.size == 0 or b.size == 0:
        raise UsageError("overlap_ratio needs two non-empty entries")
    return float(np.intersect1d(a, b).size / min(a.size, b.size))


# ---------------------------------------------------------------------------
# Long-tail users

def longtail_slice(dataset, rate: float, scorer: Optional[Callable[[list[SequenceBatch]], PredictionBatch]] = None):
    """Keep the ``ceil(rate * users)`` users with the shortest histories.

    ``dataset`` is a :class:`~collectivekv.synthdata.SynthDataset`; the slice
    keeps the dataset's user order. With a ``scorer`` the slice is also
    evaluated and ``(slice, metrics)`` is returned, else ``(slice, None)``.
    """
    if not 0 < rate <= 1:
        raise UsageError(f"longtail rate must be in (0, 1], got {rate}")
    users = dataset.users
    keep_n = max(1, math.ceil(rate * len(users) - 1e-9))
    order = sorted(range(len(users)), key=lambda i: (users[i].history.size, users[i].user_id))
    keep = {users[i].user_id for i in order[:keep_n]}
    sliced = dataset.subset([u.user_id for u in users if u.user_id in keep])
    if scorer is None:
        return sliced, None
    return sliced, evaluate_predictions(scorer(sliced.batches()))

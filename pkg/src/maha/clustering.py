"""Agglomerative clustering over stochastic-path latent means, purity-based
selection of the cluster count, and nearest-center routing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

LINKAGES = ("average", "single", "complete", "ward")


@dataclass
class LatentCatalog:
    task_ids: np.ndarray  # [n] int64
    families: list[str]
    mu: np.ndarray  # [n, d]

    def __post_init__(self):
        if len(self.task_ids) != len(self.families) or len(self.task_ids) != len(self.mu):
            raise ContractError("catalog rows misaligned")
        if len(set(self.task_ids.tolist())) != len(self.task_ids):
            raise ContractError("task ids must be unique")

    def save_csv(self, path: str) -> None:
        d = self.mu.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["task_id", "family"] + [f"dim_{i}" for i in range(d)])
            for tid, fam, row in zip(self.task_ids, self.families, self.mu):
                w.writerow([int(tid), fam] + [repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str) -> "LatentCatalog":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        d = len(header) - 2
        return cls(
            task_ids=np.array([int(r[0]) for r in body], dtype=np.int64),
            families=[r[1] for r in body],
            mu=np.array([[float(v) for v in r[2 : 2 + d]] for r in body]),
        )


def linkage_merges(mu: np.ndarray, method: str = "average") -> list[tuple[int, int]]:
    """Bottom-up merge sequence over Euclidean distances.

    Returns n-1 pairs of cluster representatives (row indices); ties break on
    the lexicographically smallest active pair, so the result is a pure
    function of the row order.
    """
    if method not in LINKAGES:
        raise ContractError(f"linkage must be one of {LINKAGES}")
    n = len(mu)
    if n == 0:
        raise ContractError("cannot cluster an empty catalog")
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    active = np.ones(n, dtype=bool)
    sizes = np.ones(n)
    merges: list[tuple[int, int]] = []
    for _ in range(n - 1):
        flat = int(np.argmin(dist))  # first occurrence = smallest (i, j)
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        merges.append((i, j))
        di, dj, dij = dist[i], dist[j], dist[i, j]
        ni, nj = sizes[i], sizes[j]
        if method == "average":
            new = (ni * di + nj * dj) / (ni + nj)
        elif method == "single":
            new = np.minimum(di, dj)
        elif method == "complete":
            new = np.maximum(di, dj)
        else:  # ward (Lance-Williams on Euclidean distances)
            nk = sizes
            new = np.sqrt(
                np.maximum(
                    ((ni + nk) * di * di + (nj + nk) * dj * dj - nk * dij * dij)
                    / (ni + nj + nk),
                    0.0,
                )
            )
        dist[i, :] = new
        dist[:, i] = new
        dist[i, i] = np.inf
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        sizes[i] = ni + nj
        active[j] = False
    return merges


def cut_merges(merges: list[tuple[int, int]], n: int, k: int) -> np.ndarray:
    """Assignments after applying the first n-k merges; labels are relabeled
    in order of first appearance so equal inputs give equal outputs."""
    if not (1 <= k <= n):
        raise ContractError(f"k={k} outside [1, {n}]")
    parent = np.arange(n)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in merges[: n - k]:
        parent[find(j)] = find(i)
    roots = np.array([find(i) for i in range(n)])
    labels = np.empty(n, dtype=np.int64)
    seen: dict[int, int] = {}
    for idx, root in enumerate(roots):
        if root not in seen:
            seen[root] = len(seen)
        labels[idx] = seen[root]
    return labels


def agglomerate(mu: np.ndarray, k: int, method: str = "average") -> np.ndarray:
    if k > len(mu):
        raise ContractError(f"k={k} exceeds {len(mu)} rows")
    return cut_merges(linkage_merges(mu, method), len(mu), k)


def purity(assignments: np.ndarray, labels: list[str] | np.ndarray) -> float:
    """Fraction of rows whose cluster's majority hidden label matches theirs."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    if assignments.shape != labels.shape:
        raise ContractError("assignments and labels must align one-to-one")
    _, label_codes = np.unique(labels, return_inverse=True)
    total = 0
    for c in np.unique(assignments):
        counts = np.bincount(label_codes[assignments == c])
        total += counts.max()
    return total / len(assignments)


def silhouette(mu: np.ndarray, assignments: np.ndarray) -> float:
    """Mean silhouette coefficient; label-free fallback for select_k
    (not part of the purity-based procedure)."""
    assignments = np.asarray(assignments)
    n = len(mu)
    ks = np.unique(assignments)
    if len(ks) < 2:
        return -1.0
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    scores = np.zeros(n)
    for i in range(n):
        own = assignments == assignments[i]
        n_own = own.sum()
        a = dist[i, own].sum() / (n_own - 1) if n_own > 1 else 0.0
        b = np.inf
        for c in ks:
            if c == assignments[i]:
                continue
            b = min(b, dist[i, assignments == c].mean())
        s = 0.0 if n_own == 1 else (b - a) / max(a, b)
        scores[i] = s
    return float(scores.mean())


def purity_by_k(mu: np.ndarray, families: list[str], k_range: range | list[int],
                method: str = "average") -> dict[int, float]:
    merges = linkage_merges(mu, method)
    n = len(mu)
    return {k: purity(cut_merges(merges, n, k), families) for k in k_range if k <= n}


def select_k(mu: np.ndarray, families: list[str], k_range: range | list[int],
             method: str = "average", selection: str = "purity") -> int:
    """Smallest k attaining the best score over the sweep (ties go low)."""
    ks = [k for k in k_range if k <= len(mu)]
    if not ks:
        raise ContractError("empty k range")
    if np.ptp(mu, axis=0).max() == 0.0:
        # all-identical embeddings carry no cluster structure; any split is
        # arbitrary, so the sweep defaults to the smallest k
        return min(ks)
    best_k, best_score = None, -np.inf
    if selection == "purity":
        scores = purity_by_k(mu, families, ks, method)
    elif selection == "silhouette":
        merges = linkage_merges(mu, method)
        scores = {k: silhouette(mu, cut_merges(merges, len(mu), k)) for k in ks}
    else:
        raise ContractError(f"unknown selection rule '{selection}'")
    for k in sorted(ks):
        if scores[k] > best_score:
            best_k, best_score = k, scores[k]
    return best_k


def route(embedding: np.ndarray, centers: np.ndarray) -> int:
    """Index of the Euclidean-nearest center; ties go to the lowest index."""
    embedding = np.asarray(embedding)
    centers = np.asarray(centers)
    if embedding.shape[-1] != centers.shape[-1]:
        raise ShapeError(
            f"embedding dim {embedding.shape[-1]} != center dim {centers.shape[-1]}")
    d = np.linalg.norm(centers - embedding[None, :], axis=1)
    return int(np.argmin(d))


def route_batch(embeddings: np.ndarray, centers: np.ndarray) -> np.ndarray:
    if embeddings.shape[-1] != centers.shape[-1]:
        raise ShapeError(
            f"embedding dim {embeddings.shape[-1]} != center dim {centers.shape[-1]}")
    d = np.linalg.norm(embeddings[:, None, :] - centers[None, :, :], axis=-1)
    return np.argmin(d, axis=1)


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray  # [k, d]
    assignments: dict[int, int]  # task_id -> cluster
    sampling_weights: list[dict[str, float]]  # per cluster, family -> ratio
    member_ids: list[list[int]] = field(default_factory=list)
    purity_by_k: dict[int, float] = field(default_factory=dict)

    def save_json(self, path: str) -> None:
        # json float serialization uses repr, which round-trips float64 exactly
        doc = {
            "k": self.k,
            "centers": [[float(v) for v in row] for row in self.centers],
            "purity_by_k": {str(k): v for k, v in self.purity_by_k.items()},
            "assignments": {str(t): int(c) for t, c in self.assignments.items()},
            "sampling_weights": self.sampling_weights,
            "member_ids": self.member_ids,
        }
        with open(path, "w") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path: str) -> "ClusterModel":
        with open(path) as f:
            doc = json.load(f)
        return cls(
            k=doc["k"],
            centers=np.array(doc["centers"], dtype=np.float64),
            assignments={int(t): int(c) for t, c in doc["assignments"].items()},
            sampling_weights=doc["sampling_weights"],
            member_ids=[list(map(int, ids)) for ids in doc.get("member_ids", [])],
            purity_by_k={int(k): float(v) for k, v in doc.get("purity_by_k", {}).items()},
        )


def fit_cluster_model(catalog: LatentCatalog, k: int, method: str = "average",
                      purity_table: dict[int, float] | None = None) -> ClusterModel:
    labels = agglomerate(catalog.mu, k, method)
    centers = np.stack([catalog.mu[labels == c].mean(axis=0) for c in range(k)])
    weights = []
    members = []
    for c in range(k):
        fams = [catalog.families[i] for i in np.flatnonzero(labels == c)]
        counts: dict[str, int] = {}
        for fam in fams:
            counts[fam] = counts.get(fam, 0) + 1
        total = sum(counts.values())
        weights.append({fam: cnt / total for fam, cnt in sorted(counts.items())})
        members.append([int(catalog.task_ids[i]) for i in np.flatnonzero(labels == c)])
    return ClusterModel(
        k=k,
        centers=centers,
        assignments={int(t): int(c) for t, c in zip(catalog.task_ids, labels)},
        sampling_weights=weights,
        member_ids=members,
        purity_by_k=purity_table or {},
    )

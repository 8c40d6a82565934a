"""Reproducible episode samplers: GP curves, the heterogeneous
sine/line/quad/cubic family, and N-way K-shot Gaussian-blob classification.

Every episode is a pure function of (dataset config, task_seed); hidden
family labels ride along for purity scoring only and never enter model
tensors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .config import DatasetConfig
from .errors import ContractError
from .tensor import Rng

log = logging.getLogger("maha.taskgen")

# disjoint task-seed namespaces for the three meta-splits and stage-2 streams
TRAIN_BASE = 0
VALID_BASE = 1 << 40
TEST_BASE = 1 << 41
STAGE2_BASE = 1 << 42

POLY_FAMILIES = ("Sine", "Line", "Quad", "Cubic")


@dataclass
class Episode:
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    way: int
    shots_context: int
    shots_target: int
    family: str
    task_seed: int


@dataclass
class EpisodeBatch:
    cx: np.ndarray
    cy: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    way: int
    families: list[str]
    task_seeds: list[int]


def collate(episodes: list[Episode]) -> EpisodeBatch:
    first = episodes[0]
    for ep in episodes[1:]:
        if ep.context_x.shape != first.context_x.shape or ep.target_x.shape != first.target_x.shape:
            raise ContractError("cannot collate episodes with mismatched shapes")
    return EpisodeBatch(
        cx=np.stack([ep.context_x for ep in episodes]),
        cy=np.stack([ep.context_y for ep in episodes]),
        tx=np.stack([ep.target_x for ep in episodes]),
        ty=np.stack([ep.target_y for ep in episodes]),
        way=first.way,
        families=[ep.family for ep in episodes],
        task_seeds=[ep.task_seed for ep in episodes],
    )


def _interval(spec: str) -> tuple[float, float]:
    lo, hi = spec.split(":")
    return float(lo), float(hi)


def poly_intervals(cfg: DatasetConfig) -> dict[str, list[tuple[float, float]]]:
    p = cfg.poly
    return {
        "Sine": [_interval(p.sine_a), _interval(p.sine_b), _interval(p.sine_c)],
        "Line": [_interval(p.line_a), _interval(p.line_b)],
        "Quad": [_interval(p.quad_a), _interval(p.quad_b), _interval(p.quad_c)],
        "Cubic": [_interval(p.cubic_a), _interval(p.cubic_b),
                  _interval(p.cubic_c), _interval(p.cubic_d)],
    }


def poly_weights(cfg: DatasetConfig) -> dict[str, float]:
    weights = {}
    for item in cfg.poly.weights.split(","):
        name, w = item.split(":")
        key = name.strip().capitalize()
        if key not in POLY_FAMILIES:
            raise ContractError(f"unknown family '{name}' in poly weights")
        weights[key] = float(w)
    total = sum(weights.values())
    if not np.isclose(total, 1.0, atol=1e-9):
        raise ContractError(f"family weights must sum to 1, got {total}")
    return weights


def draw_poly_coeffs(family: str, intervals: dict[str, list[tuple[float, float]]],
                     rng: Rng) -> np.ndarray:
    if family not in intervals:
        raise ContractError(f"unknown family '{family}'")
    return np.array([float(rng.uniform(lo, hi)) for lo, hi in intervals[family]])


def poly_value(family: str, coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    if family == "Sine":
        a, b, c = coeffs
        return a * np.sin(b * x) + c
    if family == "Line":
        a, b = coeffs
        return a * x + b
    if family == "Quad":
        a, b, c = coeffs
        return a * x**2 + b * x + c
    if family == "Cubic":
        a, b, c, d = coeffs
        return a * x**3 + b * x**2 + c * x + d
    raise ContractError(f"unknown family '{family}'")


def se_kernel(x1: np.ndarray, x2: np.ndarray, sigma: float, length_scale: float) -> np.ndarray:
    d = x1[:, None] - x2[None, :]
    return sigma**2 * np.exp(-0.5 * d * d / length_scale**2)


def split_context_target(points: np.ndarray, n_context: int, mode: str, rng: Rng,
                         fraction: float = 0.4) -> np.ndarray:
    """Pick context indices from scalar positions.

    interpolate: uniform index subset. extrapolate: context confined to a
    contiguous `fraction` sub-interval of the observed domain.
    """
    n = len(points)
    if n_context == 0:
        raise ContractError("context must contain at least one point")
    if n_context > n:
        raise ContractError(f"n_context {n_context} exceeds {n} available points")
    if n_context == n:
        return np.arange(n)
    if mode == "interpolate":
        return np.sort(rng.choice(n, n_context, replace=False))
    if mode != "extrapolate":
        raise ContractError(f"unknown split mode '{mode}'")
    lo, hi = float(points.min()), float(points.max())
    width = (hi - lo) * fraction
    for _ in range(100):
        start = float(rng.uniform(lo, hi - width))
        inside = np.flatnonzero((points >= start) & (points <= start + width))
        if len(inside) >= n_context:
            picked = rng.choice(len(inside), n_context, replace=False)
            return np.sort(inside[picked])
    raise ContractError("could not place an extrapolation window with enough points")


def _episode_rng(cfg: DatasetConfig, task_seed: int) -> Rng:
    return Rng(cfg.seed, f"task/{task_seed}")


def _context_count(cfg: DatasetConfig, rng: Rng, n_context: int | None) -> int:
    if n_context is not None:
        return n_context
    return int(rng.integers(cfg.n_context_low, cfg.n_context_high + 1))


def sample_gp_episode(cfg: DatasetConfig, task_seed: int,
                      n_context: int | None = None,
                      split: str | None = None) -> Episode:
    rng = _episode_rng(cfg, task_seed)
    g = cfg.gp
    n = cfg.n_target
    if n < 2:
        raise ContractError("GP episode needs at least 2 target points")
    x = rng.uniform(g.x_low, g.x_high, (n,))
    gram = se_kernel(x, x, g.sigma, g.length_scale) + g.noise**2 * np.eye(n)
    chol = None
    for attempt in range(7):
        jitter = 1e-10 * (10.0**attempt)
        try:
            chol = np.linalg.cholesky(gram + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            continue
    if chol is None:
        log.warning("Cholesky failed for task %d; regenerating with derived seed", task_seed)
        return sample_gp_episode(cfg, task_seed + (1 << 50), n_context, split)
    y = chol @ rng.normal((n,))
    nc = _context_count(cfg, rng.child("nctx"), n_context)
    idx = split_context_target(x, nc, split or cfg.split, rng.child("split"),
                               cfg.extrapolate_fraction)
    return Episode(
        context_x=x[idx, None], context_y=y[idx, None],
        target_x=x[:, None], target_y=y[:, None],
        way=1, shots_context=nc, shots_target=n,
        family="GP", task_seed=task_seed,
    )


def sample_poly_episode(cfg: DatasetConfig, task_seed: int,
                        family: str | None = None,
                        n_context: int | None = None,
                        split: str | None = None) -> Episode:
    rng = _episode_rng(cfg, task_seed)
    weights = poly_weights(cfg)
    intervals = poly_intervals(cfg)
    names = list(POLY_FAMILIES)
    if family is None:
        probs = np.array([weights.get(nm, 0.0) for nm in names])
        family = names[int(rng.child("family").choice(len(names), 1, replace=True, p=probs)[0])]
    elif family not in POLY_FAMILIES:
        raise ContractError(f"unknown family '{family}'")
    coeffs = draw_poly_coeffs(family, intervals, rng)
    p = cfg.poly
    n = cfg.n_target
    x = rng.uniform(p.x_low, p.x_high, (n,))
    y = poly_value(family, coeffs, x)
    if p.noise > 0:
        y = y + p.noise * rng.normal((n,))
    nc = _context_count(cfg, rng.child("nctx"), n_context)
    idx = split_context_target(x, nc, split or cfg.split, rng.child("split"),
                               cfg.extrapolate_fraction)
    return Episode(
        context_x=x[idx, None], context_y=y[idx, None],
        target_x=x[:, None], target_y=y[:, None],
        way=1, shots_context=nc, shots_target=n,
        family=family, task_seed=task_seed,
    )


def region_centers(cfg: DatasetConfig) -> np.ndarray:
    """Fixed pool-region layout: grid points spaced by the separation."""
    b = cfg.blobs
    side = int(np.ceil(np.sqrt(b.n_regions)))
    centers = np.zeros((b.n_regions, b.dim_x))
    for i in range(b.n_regions):
        centers[i, 0] = (i % side) * b.region_separation
        if b.dim_x > 1:
            centers[i, 1] = (i // side) * b.region_separation
    return centers


def blob_region_weights(cfg: DatasetConfig) -> np.ndarray:
    b = cfg.blobs
    if not b.weights:
        return np.full(b.n_regions, 1.0 / b.n_regions)
    parts = [float(w) for w in b.weights.split(",")]
    if len(parts) != b.n_regions:
        raise ContractError(f"blob weights need {b.n_regions} entries")
    arr = np.array(parts)
    if not np.isclose(arr.sum(), 1.0, atol=1e-9):
        raise ContractError("blob region weights must sum to 1")
    return arr


def sample_classification_episode(cfg: DatasetConfig, task_seed: int,
                                  region: int | None = None,
                                  label_perm: np.ndarray | None = None) -> Episode:
    """N-way K-shot episode of Gaussian blobs from one pool region; class
    labels are freshly shuffled per episode. Targets include the context
    shots plus the query shots of every class."""
    rng = _episode_rng(cfg, task_seed)
    b = cfg.blobs
    if b.way < 2:
        raise ContractError("classification needs way >= 2")
    if cfg.shot < 1:
        raise ContractError("classification needs shot >= 1")
    centers = region_centers(cfg)
    if region is None:
        probs = blob_region_weights(cfg)
        region = int(rng.child("region").choice(b.n_regions, 1, replace=True, p=probs)[0])
    blob_rng = rng.child("blobs")
    class_centers = centers[region] + b.region_spread * blob_rng.normal((b.way, b.dim_x))
    if label_perm is None:
        label_perm = rng.child("label_perm").permutation(b.way)
    label_perm = np.asarray(label_perm)
    per_class = cfg.shot + cfg.query_shot
    points = class_centers[:, None, :] + b.blob_std * blob_rng.normal(
        (b.way, per_class, b.dim_x))
    labels = np.broadcast_to(label_perm[:, None], (b.way, per_class)).copy()
    ctx_x = points[:, : cfg.shot].reshape(-1, b.dim_x)
    ctx_y = labels[:, : cfg.shot].reshape(-1)
    tgt_x = points.reshape(-1, b.dim_x)
    tgt_y = labels.reshape(-1)
    return Episode(
        context_x=ctx_x, context_y=ctx_y,
        target_x=tgt_x, target_y=tgt_y,
        way=b.way, shots_context=cfg.shot, shots_target=per_class,
        family=f"Blob{chr(65 + region)}", task_seed=task_seed,
    )


def sample_episode(cfg: DatasetConfig, task_seed: int, family: str | None = None,
                   n_context: int | None = None, split: str | None = None) -> Episode:
    if cfg.kind == "gp":
        return sample_gp_episode(cfg, task_seed, n_context, split)
    if cfg.kind == "poly":
        return sample_poly_episode(cfg, task_seed, family, n_context, split)
    if cfg.kind == "blobs":
        region = None
        if family is not None:
            region = ord(family[-1]) - 65
        return sample_classification_episode(cfg, task_seed, region=region)
    raise ContractError(f"unknown dataset kind '{cfg.kind}'")


def make_batch(cfg: DatasetConfig, task_seeds: list[int],
               families: list[str] | None = None,
               n_context: int | None = None, split: str | None = None) -> EpisodeBatch:
    """Episodes in one batch share the context size so tensors stack clean."""
    if n_context is None and cfg.kind != "blobs":
        nc_rng = _episode_rng(cfg, task_seeds[0]).child("batch_nctx")
        n_context = _context_count(cfg, nc_rng, None)
    eps = []
    for i, ts in enumerate(task_seeds):
        fam = families[i] if families is not None else None
        eps.append(sample_episode(cfg, ts, family=fam, n_context=n_context, split=split))
    return collate(eps)


def export_episodes(cfg: DatasetConfig, task_seeds: list[int], path: str,
                    n_context: int | None = None) -> None:
    with open(path, "w") as f:
        for ts in task_seeds:
            ep = sample_episode(cfg, ts, n_context=n_context)
            row = {
                "task_seed": ep.task_seed,
                "family": ep.family,
                "way": ep.way,
                "cx": ep.context_x.tolist(),
                "cy": ep.context_y.tolist(),
                "tx": ep.target_x.tolist(),
                "ty": ep.target_y.tolist(),
            }
            f.write(json.dumps(row) + "\n")


def import_episodes(path: str) -> list[Episode]:
    episodes = []
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            cy = np.asarray(row["cy"])
            ty = np.asarray(row["ty"])
            episodes.append(Episode(
                context_x=np.asarray(row["cx"]), context_y=cy,
                target_x=np.asarray(row["tx"]), target_y=ty,
                way=row["way"], shots_context=len(row["cx"]),
                shots_target=len(row["tx"]), family=row["family"],
                task_seed=row["task_seed"],
            ))
    return episodes

"""Run orchestration: single-model training, the three-stage clustered
procedure (pre-task, latent clustering, per-cluster retraining), routed
evaluation, and the artifact layout under a run directory.

Artifacts: config.json, metrics.csv, checkpoint.json, embeddings.csv,
clusters.json, per_cluster/<k>/checkpoint.json, eval_report.json,
per_task_scores.csv.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    ClusterModel,
    LatentCatalog,
    fit_cluster_model,
    purity_by_k,
    route_batch,
    select_k,
)
from .config import ModelConfig, RunConfig, save_config, to_flat
from .errors import ContractError, MissingArtifactError, NumericalError
from .losses import LossReport, loss_anp, loss_pre
from .models import NeuralProcess, build_model, predict_classification, predict_regression
from .nn import Adam, load_checkpoint, restore_model, save_checkpoint
from .taskgen import STAGE2_BASE, TEST_BASE, TRAIN_BASE, VALID_BASE, EpisodeBatch, make_batch
from .tensor import Rng, no_grad

log = logging.getLogger("maha.pipeline")


@dataclass
class TrainResult:
    status: str  # converged | max_steps | diverged
    steps_run: int
    best_step: int
    best_val: float


@dataclass
class EvalReport:
    metric: str
    mean: float
    ci95_halfwidth: float
    n_tasks: int
    per_family: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")


def _fmt(v: float) -> str:
    return repr(float(v))


class MetricsWriter:
    def __init__(self, path: str):
        self.f = open(path, "w")
        self.f.write("step,loss,nll,kl\n")

    def row(self, report: LossReport) -> None:
        self.f.write(f"{report.step},{_fmt(report.total)},{_fmt(report.nll)},{_fmt(report.kl)}\n")

    def close(self) -> None:
        self.f.close()


def train_loop(model: NeuralProcess, cfg: RunConfig, batch_fn, loss_fn,
               run_rng: Rng, metrics_path: str, steps_max: int) -> TrainResult:
    """Adam loop with periodic validation, patience-based early stopping and
    best-checkpoint restoration. batch_fn(step) -> EpisodeBatch;
    loss_fn(model, batch, rng, train, step) -> (loss tensor, LossReport)."""
    tr = cfg.train
    opt = Adam(model.parameters(), lr=tr.lr)
    writer = MetricsWriter(metrics_path)
    best_state = model.state_dict()
    best_val = np.inf
    best_step = 0
    bad_rounds = 0
    status = "max_steps"
    val_ids = [VALID_BASE + i for i in range(tr.val_episodes)]
    step = 0
    try:
        for step in range(steps_max):
            batch = batch_fn(step)
            try:
                loss, report = loss_fn(model, batch, run_rng.child("step", step), True, step)
                if not np.isfinite(report.total):
                    raise NumericalError(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step()
            except NumericalError as e:
                log.warning("training diverged: %s; restoring best checkpoint", e)
                status = "diverged"
                break
            if step % tr.log_every == 0:
                writer.row(report)
            if (step + 1) % tr.val_every == 0:
                val = _validation_loss(model, cfg, val_ids, loss_fn)
                if val < best_val - 1e-9:
                    best_val = val
                    best_state = model.state_dict()
                    best_step = step + 1
                    bad_rounds = 0
                else:
                    bad_rounds += 1
                    if bad_rounds >= tr.patience:
                        status = "converged"
                        break
    finally:
        writer.close()
    if best_val is np.inf or best_step == 0:
        best_state = model.state_dict()
        best_step = step if steps_max > 0 else 0
    model.load_state(best_state)
    return TrainResult(status=status, steps_run=min(step + 1, steps_max),
                       best_step=best_step, best_val=float(best_val))


def _validation_loss(model: NeuralProcess, cfg: RunConfig, val_ids: list[int], loss_fn) -> float:
    """Fixed meta-valid episodes scored with a fixed noise stream each round."""
    tr = cfg.train
    noise_rng = Rng(cfg.dataset.seed, "val_noise")
    totals = []
    with no_grad():
        for off in range(0, len(val_ids), tr.batch_tasks):
            ids = val_ids[off : off + tr.batch_tasks]
            batch = make_batch(cfg.dataset, ids)
            _, report = loss_fn(model, batch, noise_rng.child("b", off), True, -1)
            totals.append(report.total)
    return float(np.mean(totals))


def _train_batch_fn(cfg: RunConfig, base: int = TRAIN_BASE):
    b = cfg.train.batch_tasks

    def fn(step: int) -> EpisodeBatch:
        ids = [base + step * b + j for j in range(b)]
        return make_batch(cfg.dataset, ids)

    return fn


def _stage2_batch_fn(cfg: RunConfig, cluster_idx: int, cluster: ClusterModel):
    """Skewed episode stream for one cluster: either fresh tasks with family
    probabilities at the member ratios, or resampled member tasks."""
    b = cfg.train.batch_tasks
    weights = cluster.sampling_weights[cluster_idx]
    fams = sorted(weights)
    probs = np.array([weights[f] for f in fams])
    members = cluster.member_ids[cluster_idx] if cluster.member_ids else []
    base = STAGE2_BASE + cluster_idx * (1 << 32)

    def fn(step: int) -> EpisodeBatch:
        if cfg.stage2.sampling == "members":
            pick_rng = Rng(cfg.dataset.seed, f"stage2pick/{cluster_idx}/{step}")
            ids = [members[i] for i in pick_rng.choice(len(members), b, replace=True)]
            return make_batch(cfg.dataset, ids)
        ids = [base + step * b + j for j in range(b)]
        fam_rng = Rng(cfg.dataset.seed, f"stage2fam/{cluster_idx}/{step}")
        idx = fam_rng.choice(len(fams), b, replace=True, p=probs)
        return make_batch(cfg.dataset, ids, families=[fams[i] for i in idx])

    return fn


def _loss_anp_fn(cfg: RunConfig):
    def fn(model, batch, rng, train, step):
        return loss_anp(model, batch, cfg.loss, rng, train=train, step=step)

    return fn


def _loss_pre_fn(cfg: RunConfig):
    def fn(model, batch, rng, train, step):
        return loss_pre(model, batch, cfg.loss, rng, pool=cfg.pretrain.pool,
                        autoencode=cfg.pretrain.autoencode, train=train, step=step)

    return fn


def _episode_way(cfg: RunConfig) -> int:
    return cfg.dataset.blobs.way if cfg.model.task == "classification" else 1


def _materialize_model(cfg: RunConfig, kind: str, rng: Rng) -> NeuralProcess:
    mc = dataclasses.replace(cfg.model, kind=kind)
    return build_model(mc, rng, way=_episode_way(cfg))


# -- stages -------------------------------------------------------------------

def train_single(cfg: RunConfig, out_dir: str) -> TrainResult:
    """Single-phase training for every kind except MAHA."""
    if cfg.model.kind == "MAHA":
        raise ContractError("train_single cannot run the MAHA pipeline; use stage functions")
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))
    rng = Rng(cfg.seed, "train")
    model = _materialize_model(cfg, cfg.model.kind, rng.child("init"))
    result = train_loop(model, cfg, _train_batch_fn(cfg), _loss_anp_fn(cfg), rng,
                        os.path.join(out_dir, "metrics.csv"), cfg.train.steps_max)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), cfg.model.kind,
                    to_flat(cfg), model)
    return result


def pretrain(cfg: RunConfig, out_dir: str) -> tuple[TrainResult, LatentCatalog]:
    """Stage 1: train the pre-task model with the pooled auto-encoding loss,
    then embed the meta-train catalog tasks from their contexts."""
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))
    rng = Rng(cfg.seed, "pretrain")
    model = _materialize_model(cfg, "FELD", rng.child("init"))
    result = train_loop(model, cfg, _train_batch_fn(cfg), _loss_pre_fn(cfg), rng,
                        os.path.join(out_dir, "metrics.csv"), cfg.pretrain.steps_max)
    save_checkpoint(os.path.join(out_dir, "checkpoint.json"), "FELD", to_flat(cfg), model)
    catalog = embed_catalog(model, cfg)
    catalog.save_csv(os.path.join(out_dir, "embeddings.csv"))
    return result, catalog


def embed_catalog(model: NeuralProcess, cfg: RunConfig) -> LatentCatalog:
    """mu of q(z-bar|C) for the catalog prefix of meta-train tasks, with C at
    the evaluation shot count."""
    ids = [TRAIN_BASE + i for i in range(cfg.pretrain.catalog_tasks)]
    mus, fams = [], []
    nc = cfg.eval.n_context if cfg.model.task == "regression" else None
    for off in range(0, len(ids), 128):
        chunk = ids[off : off + 128]
        batch = make_batch(cfg.dataset, chunk, n_context=nc)
        mus.append(model.embed_mu(batch.cx, batch.cy))
        fams.extend(batch.families)
    return LatentCatalog(task_ids=np.array(ids, dtype=np.int64), families=fams,
                         mu=np.concatenate(mus, axis=0))


def cluster_stage(cfg: RunConfig, out_dir: str) -> ClusterModel:
    """Stage 2a: agglomerate the catalog, choose k, persist clusters.json."""
    emb_path = os.path.join(out_dir, "embeddings.csv")
    if not os.path.exists(emb_path):
        raise MissingArtifactError(f"no embeddings.csv in {out_dir}; run pretrain first")
    catalog = LatentCatalog.load_csv(emb_path)
    ks = list(range(cfg.cluster.k_min, cfg.cluster.k_max + 1))
    table = purity_by_k(catalog.mu, catalog.families, ks, cfg.cluster.linkage)
    if cfg.cluster.k_override:
        k = cfg.cluster.k_override
    else:
        k = select_k(catalog.mu, catalog.families, ks, cfg.cluster.linkage,
                     cfg.cluster.selection)
    cluster = fit_cluster_model(catalog, k, cfg.cluster.linkage, purity_table=table)
    cluster.save_json(os.path.join(out_dir, "clusters.json"))
    return cluster


def train_clustered(cfg: RunConfig, out_dir: str) -> list[TrainResult]:
    """Stage 2b: per cluster, a fresh model trained on the skewed stream."""
    cluster_path = os.path.join(out_dir, "clusters.json")
    if not os.path.exists(cluster_path):
        raise MissingArtifactError(f"no clusters.json in {out_dir}; run cluster first")
    cluster = ClusterModel.load_json(cluster_path)
    keep = [c for c in range(cluster.k) if cluster.sampling_weights[c]]
    if len(keep) < cluster.k:
        dropped = sorted(set(range(cluster.k)) - set(keep))
        log.warning("dropping empty clusters %s", dropped)
        cluster = ClusterModel(
            k=len(keep),
            centers=cluster.centers[keep],
            assignments={t: keep.index(c) for t, c in cluster.assignments.items() if c in keep},
            sampling_weights=[cluster.sampling_weights[c] for c in keep],
            member_ids=[cluster.member_ids[c] for c in keep] if cluster.member_ids else [],
            purity_by_k=cluster.purity_by_k,
        )
        cluster.save_json(cluster_path)
    rng = Rng(cfg.seed, "stage2")
    results = []
    stage2_cfg = dataclasses.replace(
        cfg, train=dataclasses.replace(cfg.train, steps_max=cfg.stage2.steps_max))
    for c in range(cluster.k):
        cdir = os.path.join(out_dir, "per_cluster", str(c))
        os.makedirs(cdir, exist_ok=True)
        model = _materialize_model(cfg, "FELD", rng.child("init", c))
        result = train_loop(model, stage2_cfg, _stage2_batch_fn(cfg, c, cluster),
                            _loss_anp_fn(cfg), rng.child("run", c),
                            os.path.join(cdir, "metrics.csv"), cfg.stage2.steps_max)
        save_checkpoint(os.path.join(cdir, "checkpoint.json"), "FELD", to_flat(cfg), model)
        results.append(result)
    return results


# -- evaluation ---------------------------------------------------------------

def _load_model_from(path: str, cfg: RunConfig, kind: str) -> NeuralProcess:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing checkpoint {path}")
    doc = load_checkpoint(path)
    model = _materialize_model(cfg, kind, Rng(0, "load"))
    restore_model(model, doc)
    return model


def _score_batch(model: NeuralProcess, batch: EpisodeBatch, cfg: RunConfig,
                 rng: Rng) -> np.ndarray:
    if cfg.model.task == "classification":
        probs = predict_classification(model, batch.cx, batch.cy, batch.tx, rng,
                                       cfg.loss.mc_samples_eval)
        pred = probs.argmax(axis=-1)
        return (pred == batch.ty).mean(axis=1)
    mean, _ = predict_regression(model, batch.cx, batch.cy, batch.tx, rng,
                                 cfg.loss.mc_samples_eval)
    return ((mean - batch.ty) ** 2).mean(axis=(1, 2))


def _eval_batches(cfg: RunConfig):
    ev = cfg.eval
    nc = ev.n_context if cfg.model.task == "regression" else None
    for off in range(0, ev.n_tasks, ev.batch_tasks):
        ids = [TEST_BASE + off + j for j in range(min(ev.batch_tasks, ev.n_tasks - off))]
        yield off, make_batch(cfg.dataset, ids, n_context=nc, split=ev.split)


def evaluate_single_model(model: NeuralProcess, cfg: RunConfig, rng: Rng):
    scores, fams, ids = [], [], []
    for off, batch in _eval_batches(cfg):
        s = _score_batch(model, batch, cfg, rng.child("batch", off))
        scores.extend(s.tolist())
        fams.extend(batch.families)
        ids.extend(batch.task_seeds)
    return np.array(scores), fams, ids


def evaluate_maha(stage1: NeuralProcess, cluster: ClusterModel,
                  members: list[NeuralProcess], cfg: RunConfig, rng: Rng):
    scores = np.zeros(cfg.eval.n_tasks)
    fams: list[str] = []
    ids: list[int] = []
    routed = np.zeros(cfg.eval.n_tasks, dtype=np.int64)
    for off, batch in _eval_batches(cfg):
        emb = stage1.embed_mu(batch.cx, batch.cy)
        assign = route_batch(emb, cluster.centers)
        n = len(batch.task_seeds)
        batch_scores = np.zeros(n)
        for c in np.unique(assign):
            sel = np.flatnonzero(assign == c)
            sub = EpisodeBatch(
                cx=batch.cx[sel], cy=batch.cy[sel], tx=batch.tx[sel], ty=batch.ty[sel],
                way=batch.way,
                families=[batch.families[i] for i in sel],
                task_seeds=[batch.task_seeds[i] for i in sel],
            )
            batch_scores[sel] = _score_batch(members[c], sub, cfg,
                                             rng.child("batch", off, "cluster", int(c)))
        scores[off : off + n] = batch_scores
        routed[off : off + n] = assign
        fams.extend(batch.families)
        ids.extend(batch.task_seeds)
    return scores, fams, ids, routed


def _build_report(scores: np.ndarray, fams: list[str], cfg: RunConfig,
                  metadata: dict) -> EvalReport:
    n = len(scores)
    metric = "accuracy" if cfg.model.task == "classification" else "mse"
    ci = 1.96 * float(np.std(scores, ddof=1)) / np.sqrt(n) if n > 1 else 0.0
    per_family: dict[str, dict] = {}
    for fam in sorted(set(fams)):
        sel = np.array([f == fam for f in fams])
        fs = scores[sel]
        fci = 1.96 * float(np.std(fs, ddof=1)) / np.sqrt(len(fs)) if len(fs) > 1 else 0.0
        per_family[fam] = {"mean": float(fs.mean()), "ci95_halfwidth": fci,
                           "n_tasks": int(sel.sum())}
    return EvalReport(metric=metric, mean=float(scores.mean()), ci95_halfwidth=ci,
                      n_tasks=n, per_family=per_family, metadata=metadata)


def _write_scores(path: str, ids: list[int], fams: list[str], scores: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("task_seed,family,score\n")
        for tid, fam, s in zip(ids, fams, scores):
            f.write(f"{tid},{fam},{_fmt(s)}\n")


def evaluate_run(cfg: RunConfig, out_dir: str) -> EvalReport:
    """Evaluate the artifacts in out_dir; MAHA runs route per episode."""
    rng = Rng(cfg.seed, "eval")
    metadata = {
        "model_kind": cfg.model.kind,
        "n_context": cfg.eval.n_context,
        "mc_samples_eval": cfg.loss.mc_samples_eval,
        # the reported regression metric scores the MC-averaged predictive mean
        "predictive": f"mc{cfg.loss.mc_samples_eval}_mean",
    }
    if cfg.model.kind == "MAHA":
        cluster_path = os.path.join(out_dir, "clusters.json")
        if not os.path.exists(cluster_path):
            raise MissingArtifactError(f"missing clusters.json in {out_dir}")
        cluster = ClusterModel.load_json(cluster_path)
        stage1 = _load_model_from(os.path.join(out_dir, "checkpoint.json"), cfg, "FELD")
        members = [
            _load_model_from(os.path.join(out_dir, "per_cluster", str(c), "checkpoint.json"),
                             cfg, "FELD")
            for c in range(cluster.k)
        ]
        scores, fams, ids, routed = evaluate_maha(stage1, cluster, members, cfg, rng)
        metadata["k"] = cluster.k
        metadata["routed_counts"] = {str(c): int((routed == c).sum())
                                     for c in sorted(set(routed.tolist()))}
    else:
        model = _load_model_from(os.path.join(out_dir, "checkpoint.json"), cfg,
                                 cfg.model.kind)
        scores, fams, ids = evaluate_single_model(model, cfg, rng)
    report = _build_report(scores, fams, cfg, metadata)
    _write_scores(os.path.join(out_dir, "per_task_scores.csv"), ids, fams, scores)
    report.to_json(os.path.join(out_dir, "eval_report.json"))
    return report

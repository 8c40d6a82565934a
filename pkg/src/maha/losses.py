"""Training objectives: the (A)NP ELBO approximation with a T-conditioned
posterior, and the pre-task loss with dimension-wise pooling and the
auto-encoding deterministic path."""

from __future__ import annotations

from dataclasses import dataclass

from .config import LossConfig
from .encoders import EncoderOutput, pool_dimensionwise
from .errors import ContractError
from .models import NeuralProcess
from .tensor import Rng, Tensor, mean_over
from .variational import categorical_nll, gaussian_nll, kl_divergence, reparameterize


@dataclass
class LossReport:
    total: float
    nll: float
    kl: float
    step: int = 0


def _nll(model: NeuralProcess, pred, batch) -> Tensor:
    if model.task == "classification":
        return categorical_nll(pred, batch.ty)
    return gaussian_nll(pred, Tensor(batch.ty))


def _mc_nll(model: NeuralProcess, batch, r_used, z_post, rng: Rng, samples: int) -> Tensor:
    total = None
    for s in range(samples):
        z = reparameterize(z_post, rng.child("mc", s))
        pred = model.decode(batch.tx, r_used, z.value)
        term = _nll(model, pred, batch)
        total = term if total is None else total + term
    return total * (1.0 / samples)


def loss_anp(model: NeuralProcess, batch, cfg: LossConfig, rng: Rng,
             train: bool = True, step: int = 0) -> tuple[Tensor, LossReport]:
    """NLL under r from C and z from the T-conditioned posterior, plus
    beta1 * KL(q(z|T) || q(z|C)). Deterministic models reduce to pure NLL."""
    if batch.cx.shape[1] == 0 or batch.tx.shape[1] == 0:
        raise ContractError("episode needs nonempty context and target sets")
    out_c = model.encode_set(batch.cx, batch.cy, query_x=batch.tx)
    if not model.has_z:
        pred = model.decode(batch.tx, out_c.r, None)
        nll = _nll(model, pred, batch)
        report = LossReport(total=float(nll.data), nll=float(nll.data), kl=0.0, step=step)
        return nll, report
    out_t = model.encode_set(batch.tx, batch.ty, query_x=batch.tx)
    kl = mean_over(kl_divergence(out_t.z, out_c.z))
    z_source = out_t.z if train else out_c.z
    samples = cfg.mc_samples_train if train else cfg.mc_samples_eval
    nll = _mc_nll(model, batch, out_c.r, z_source, rng, samples)
    total = nll + cfg.beta1 * kl
    report = LossReport(total=float(total.data), nll=float(nll.data),
                        kl=float(kl.data), step=step)
    return total, report


def loss_pre(model: NeuralProcess, batch, cfg: LossConfig, rng: Rng,
             pool: bool = True, autoencode: bool = True,
             train: bool = True, step: int = 0) -> tuple[Tensor, LossReport]:
    """Pre-task objective: the deterministic path comes from T when
    auto-encoding and is batch-pooled when pooling; z is way-pooled in
    classification. KL is beta2 * KL(q(z-bar|T) || q(z-bar|C))."""
    if model.kind not in ("FELD", "NP_LD"):
        raise ContractError("pre-task loss needs a linear-decoder model")
    if batch.cx.shape[1] == 0 or batch.tx.shape[1] == 0:
        raise ContractError("episode needs nonempty context and target sets")
    mode = model.task
    out_c = model.encode_set(batch.cx, batch.cy)
    out_t = model.encode_set(batch.tx, batch.ty)
    r_source = out_t.r if autoencode else out_c.r
    if pool:
        pooled_post = pool_dimensionwise(
            EncoderOutput(r=r_source, z=out_t.z, per_way=out_t.per_way), mode)
        pooled_prior = pool_dimensionwise(out_c, mode)
        r_used = pooled_post.r_bar
        z_post = pooled_post.z_bar
        z_prior = pooled_prior.z_bar
    else:
        r_used = r_source
        z_post = out_t.z
        z_prior = out_c.z
    kl = mean_over(kl_divergence(z_post, z_prior))
    z_source = z_post if train else z_prior
    samples = cfg.mc_samples_train if train else cfg.mc_samples_eval
    nll = _mc_nll(model, batch, r_used, z_source, rng, samples)
    total = nll + cfg.beta2 * kl
    report = LossReport(total=float(total.data), nll=float(nll.data),
                        kl=float(kl.data), step=step)
    return total, report

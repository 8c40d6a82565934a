"""Model assembly: wires an encoder variant to a decoder per model kind.

Kinds: CNP (deterministic path only), NP (mean-pool encoder), ANP (attention
encoder), NP_FE (Set-Transformer encoder), NP_LD (mean-pool encoder + linear
decoder), FELD (Set-Transformer encoder + linear decoder). Classification
supports the linear-decoder kinds; class sets are encoded per way from their
inputs alone, so label identity enters only through the partition order.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoders import ConventionalDecoder, LinearDecoder
from .encoders import (
    AttnSetEncoder,
    EncoderOutput,
    MLPSetEncoder,
    StConfig,
    StSetEncoder,
    pool_dimensionwise,
)
from .errors import ContractError
from .nn import Module
from .tensor import Rng, Tensor, concat, no_grad, reshape, softmax
from .variational import DiagonalGaussian, reparameterize

LINEAR_DECODER_KINDS = ("NP_LD", "FELD")
ST_ENCODER_KINDS = ("NP_FE", "FELD")


class NeuralProcess(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng, way: int = 1):
        if cfg.kind == "MAHA":
            raise ContractError("MAHA is a pipeline, not a single model; build FELD stages")
        self.cfg = cfg
        self.kind = cfg.kind
        self.task = cfg.task
        self.way = way
        self.has_z = cfg.kind != "CNP"
        z_dim = cfg.z_dim if self.has_z else 0
        self.z_dim = z_dim
        f = cfg.feature_dim
        linear = cfg.kind in LINEAR_DECODER_KINDS

        if cfg.task == "classification":
            if not linear:
                raise ContractError(f"classification needs a linear-decoder kind, got {cfg.kind}")
            enc_in = cfg.dim_x  # per-way sets carry no label channel
            r_width = f
            rows = way
        else:
            enc_in = cfg.dim_x + cfg.dim_y
            rows = 2 * cfg.dim_y
            r_width = rows * f if linear else f

        enc_rng = rng.child("encoder")
        if cfg.kind in ST_ENCODER_KINDS:
            st = StConfig(
                num_sab_blocks=cfg.st_blocks,
                num_heads=cfg.st_heads,
                feature_dim=f,
                num_inducing=cfg.st_inducing,
                pma_seeds=cfg.pma_seeds or (2 if cfg.task == "classification" else 1),
            )
            self.encoder = StSetEncoder(enc_in, st, r_width, z_dim, cfg.hidden_dim,
                                        enc_rng, cfg.ln_affine,
                                        head_scale=cfg.head_init_scale)
        elif cfg.kind == "ANP":
            self.encoder = AttnSetEncoder(cfg.dim_x, cfg.dim_y, f, cfg.st_heads, z_dim,
                                          cfg.hidden_dim, enc_rng,
                                          cfg.anp_self_attn_blocks, cfg.ln_affine,
                                          head_scale=cfg.head_init_scale)
        else:  # CNP, NP, NP_LD
            self.encoder = MLPSetEncoder(enc_in, cfg.hidden_dim, r_width, z_dim,
                                         cfg.enc_depth, enc_rng,
                                         head_scale=cfg.head_init_scale)

        dec_rng = rng.child("decoder")
        if linear:
            self.decoder = LinearDecoder(
                cfg.dim_x, f, z_dim, rows, cfg.task, cfg.hidden_dim, dec_rng,
                ln_affine=cfg.ln_affine,
                g_depth=2 if cfg.task == "classification" else 1,
            )
        else:
            self.decoder = ConventionalDecoder(cfg.dim_x, cfg.dim_y, f, z_dim,
                                               cfg.hidden_dim, cfg.dec_depth, dec_rng)

    # -- encoding --------------------------------------------------------
    def encode_set(self, x: np.ndarray, y: np.ndarray,
                   query_x: np.ndarray | None = None) -> EncoderOutput:
        """Encode a batch of sets. Regression: x [B,N,dx], y [B,N,dy].
        Classification: x [B,N,dx] with integer labels y [B,N]; the set is
        partitioned by way and each partition encoded independently."""
        if x.shape[1] == 0:
            raise ContractError("cannot encode an empty set")
        if self.task == "classification":
            return self._encode_per_way(x, y)
        if self.kind == "ANP":
            if query_x is None:
                raise ContractError("attention encoder needs query inputs")
            return self.encoder(Tensor(x), Tensor(y), Tensor(query_x))
        pairs = np.concatenate([x, y], axis=-1)
        return self.encoder(Tensor(pairs))

    def _encode_per_way(self, x: np.ndarray, labels: np.ndarray) -> EncoderOutput:
        b, n, dx = x.shape
        per = n // self.way
        if per * self.way != n:
            raise ContractError(f"{n} points do not split into {self.way} equal ways")
        order = np.argsort(labels, axis=1, kind="stable")
        grouped = np.take_along_axis(x, order[..., None], axis=1)
        flat = grouped.reshape(b * self.way, per, dx)
        out = self.encoder(Tensor(flat))
        r = reshape(out.r, (b, self.way, out.r.shape[-1]))
        z = None
        if out.z is not None:
            z = DiagonalGaussian(
                reshape(out.z.mean, (b, self.way, self.z_dim)),
                reshape(out.z.raw_scale, (b, self.way, self.z_dim)),
                out.z.transform,
            )
        return EncoderOutput(r=r, z=z, per_way=True)

    # -- decoding --------------------------------------------------------
    def decode(self, tx: np.ndarray | Tensor, r: Tensor, z_value: Tensor | None):
        tx = tx if isinstance(tx, Tensor) else Tensor(tx)
        return self.decoder(tx, r, z_value)

    # -- task embedding (stochastic path mean, way-pooled) ----------------
    def embed_mu(self, cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
        """mu of q(z-bar | C) per task; the clustering/routing embedding."""
        if not self.has_z:
            raise ContractError("deterministic model has no latent embedding")
        with no_grad():
            out = self.encode_set(cx, cy, query_x=cx)
            if out.per_way:
                out_mean = pool_dimensionwise(out, "classification").z_bar.mean
            else:
                out_mean = out.z.mean
        return np.asarray(out_mean.data)


def predict_regression(model: NeuralProcess, cx, cy, tx, rng: Rng,
                       mc_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of T_y given (C, T_x); z from q(z|C)."""
    with no_grad():
        out_c = model.encode_set(cx, cy, query_x=tx)
        if not model.has_z:
            pred = model.decode(tx, out_c.r, None)
            return np.asarray(pred.mean.data), np.asarray(pred.variance().data)
        mus, second = [], []
        for s in range(mc_samples):
            z = reparameterize(out_c.z, rng.child("mc", s))
            pred = model.decode(tx, out_c.r, z.value)
            mu = np.asarray(pred.mean.data)
            var = np.asarray(pred.variance().data)
            mus.append(mu)
            second.append(var + mu * mu)
        mean = np.mean(mus, axis=0)
        var = np.mean(second, axis=0) - mean * mean
        return mean, np.maximum(var, 0.0)


def predict_classification(model: NeuralProcess, cx, cy, tx, rng: Rng,
                           mc_samples: int) -> np.ndarray:
    """Mean softmax probabilities over ways for each target point."""
    with no_grad():
        out_c = model.encode_set(cx, cy)
        probs = []
        for s in range(mc_samples):
            z = reparameterize(out_c.z, rng.child("mc", s))
            logits = model.decode(tx, out_c.r, z.value)
            probs.append(np.asarray(softmax(logits, axis=-1).data))
        return np.mean(probs, axis=0)


def build_model(cfg: ModelConfig, rng: Rng, way: int = 1) -> NeuralProcess:
    return NeuralProcess(cfg, rng, way=way)

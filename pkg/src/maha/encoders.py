"""Set encoders: mean-pool MLP, attention (cross-attention to target inputs),
and the Set-Transformer encoder, plus the dimension-wise pooling that averages
the deterministic path over the batch axis and the stochastic path over way."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import MLP, LayerNorm, Linear, Module, Parameter, fan_in_uniform
from .tensor import (
    Rng,
    Tensor,
    broadcast_to,
    concat,
    matmul,
    mean_over,
    narrow,
    permute,
    reshape,
    softmax,
    swap_last2,
)
from .variational import BOUNDED_SIGMOID, DiagonalGaussian


@dataclass
class StConfig:
    num_sab_blocks: int = 2
    num_heads: int = 4
    feature_dim: int = 64
    num_inducing: int = 0  # 0 = full self-attention; inducing points unsupported
    pma_seeds: int = 1

    def __post_init__(self):
        if self.feature_dim % self.num_heads != 0:
            raise ContractError(
                f"feature_dim {self.feature_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_inducing != 0:
            raise ContractError("inducing-point attention is not supported; use num_inducing=0")
        if self.pma_seeds not in (1, 2):
            raise ContractError("pma_seeds must be 1 (shared) or 2 (one per path)")


@dataclass
class EncoderOutput:
    """Deterministic representation r plus stochastic-path parameters.

    r is [batch, 1, width] for set-pooled encoders, [batch, n_target, width]
    for the attention encoder, and [batch, way, width] in per-way mode.
    z is per batch instance ([batch, z_dim]) or per way ([batch, way, z_dim]).
    """

    r: Tensor
    z: DiagonalGaussian | None
    per_way: bool = False


@dataclass
class PooledLatents:
    """Batch-pooled deterministic path and way-pooled stochastic path."""

    r_bar: Tensor
    z_bar: DiagonalGaussian | None
    per_way: bool = False


def split_moments(zz: Tensor, z_dim: int) -> DiagonalGaussian:
    mu = narrow(zz, -1, 0, z_dim)
    raw = narrow(zz, -1, z_dim, z_dim)
    return DiagonalGaussian(mu, raw, BOUNDED_SIGMOID)


class MultiheadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads != 0:
            raise ContractError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng.child("wq"))
        self.wk = Linear(dim, dim, rng.child("wk"))
        self.wv = Linear(dim, dim, rng.child("wv"))
        self.wo = Linear(dim, dim, rng.child("wo"))

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return permute(reshape(x, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        """q [B,Nq,D], k/v [B,Nk,D]; mask [B,Nk] marks attendable keys."""
        if k.shape[1] == 0:
            raise ContractError("attention over an empty set")
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))
        scores = matmul(qh, swap_last2(kh)) * (1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        attn = softmax(scores, axis=-1, mask=mask)
        out = matmul(attn, vh)  # [B,H,Nq,dh]
        b, _, nq, _ = out.shape
        out = reshape(permute(out, (0, 2, 1, 3)), (b, nq, self.heads * self.head_dim))
        return self.wo(out)


class SAB(Module):
    """Self-attention block: attention + residual + LN, rFF + residual + LN."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: Rng, ln_affine: bool = True):
        self.attn = MultiheadAttention(dim, heads, rng.child("attn"))
        self.ln1 = LayerNorm(dim, affine=ln_affine)
        self.ff = MLP([dim, hidden, dim], rng.child("ff"))
        self.ln2 = LayerNorm(dim, affine=ln_affine)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x + self.attn(x, x, x, mask=mask))
        return self.ln2(h + self.ff(h))


class PMA(Module):
    """Pooling by multihead attention with learned seed vectors."""

    def __init__(self, dim: int, heads: int, n_seeds: int, hidden: int, rng: Rng,
                 ln_affine: bool = True):
        self.seeds = Parameter(fan_in_uniform(rng.child("seeds"), dim, (n_seeds, dim)))
        self.attn = MultiheadAttention(dim, heads, rng.child("attn"))
        self.ln1 = LayerNorm(dim, affine=ln_affine)
        self.ff = MLP([dim, hidden, dim], rng.child("ff"))
        self.ln2 = LayerNorm(dim, affine=ln_affine)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b = x.shape[0]
        s, d = self.seeds.data.shape
        seeds = broadcast_to(reshape(self.seeds.tensor, (1, s, d)), (b, s, d))
        h = self.ln1(seeds + self.attn(seeds, x, x, mask=mask))
        return self.ln2(h + self.ff(h))  # [B, n_seeds, dim]


class MLPSetEncoder(Module):
    """Two independent rFF stacks mean-pooled over the shot axis."""

    def __init__(self, dim_in: int, hidden: int, r_width: int, z_dim: int,
                 depth: int, rng: Rng, head_scale: float = 1.0):
        self.z_dim = z_dim
        self.r_ff = MLP([dim_in] + [hidden] * depth + [r_width], rng.child("r_ff"),
                        out_scale=head_scale)
        if z_dim > 0:
            self.z_ff = MLP([dim_in] + [hidden] * depth + [2 * z_dim], rng.child("z_ff"),
                            out_scale=head_scale)

    def __call__(self, pairs: Tensor) -> EncoderOutput:
        if pairs.shape[1] == 0:
            raise ContractError("cannot encode an empty set")
        r = mean_over(self.r_ff(pairs), axis=1, keepdims=True)  # [B,1,W]
        z = None
        if self.z_dim > 0:
            zz = mean_over(self.z_ff(pairs), axis=1)
            z = split_moments(zz, self.z_dim)
        return EncoderOutput(r=r, z=z)


class StSetEncoder(Module):
    """Set Transformer: lift, SAB stack, PMA, then per-path linear heads."""

    def __init__(self, dim_in: int, cfg: StConfig, r_width: int, z_dim: int,
                 hidden: int, rng: Rng, ln_affine: bool = True,
                 head_scale: float = 1.0):
        self.cfg = cfg
        self.z_dim = z_dim
        f = cfg.feature_dim
        self.lift = Linear(dim_in, f, rng.child("lift"))
        self.n_blocks = cfg.num_sab_blocks
        for i in range(self.n_blocks):
            setattr(self, f"sab{i}",
                    SAB(f, cfg.num_heads, hidden, rng.child("sab", i), ln_affine))
        n_seeds = cfg.pma_seeds if z_dim > 0 else 1
        self.n_seeds = n_seeds
        self.pma = PMA(f, cfg.num_heads, n_seeds, hidden, rng.child("pma"), ln_affine)
        self.r_head = Linear(f, r_width, rng.child("r_head"), init_scale=head_scale)
        if z_dim > 0:
            self.z_head = Linear(f, 2 * z_dim, rng.child("z_head"), init_scale=head_scale)

    def __call__(self, pairs: Tensor, mask: np.ndarray | None = None) -> EncoderOutput:
        if pairs.shape[1] == 0:
            raise ContractError("cannot encode an empty set")
        h = self.lift(pairs)
        for i in range(self.n_blocks):
            h = getattr(self, f"sab{i}")(h, mask=mask)
        pooled = self.pma(h, mask=mask)  # [B, n_seeds, F]
        r_in = narrow(pooled, 1, 0, 1)
        r = self.r_head(r_in)  # [B,1,r_width]
        z = None
        if self.z_dim > 0:
            z_in = narrow(pooled, 1, self.n_seeds - 1, 1)
            zz = reshape(self.z_head(z_in), (pairs.shape[0], 2 * self.z_dim))
            z = split_moments(zz, self.z_dim)
        return EncoderOutput(r=r, z=z)


class AttnSetEncoder(Module):
    """Cross-attention encoder: self-attention over context pair embeddings,
    per-target r via multihead attention with queries from the target inputs,
    and an NP-style pooled stochastic path."""

    def __init__(self, dim_x: int, dim_y: int, feature_dim: int, heads: int,
                 z_dim: int, hidden: int, rng: Rng, self_attn_blocks: int = 2,
                 ln_affine: bool = True, head_scale: float = 1.0):
        f = feature_dim
        self.z_dim = z_dim
        self.pair_embed = MLP([dim_x + dim_y, hidden, f], rng.child("pair_embed"))
        self.n_blocks = self_attn_blocks
        for i in range(self.n_blocks):
            setattr(self, f"sab{i}", SAB(f, heads, hidden, rng.child("sab", i), ln_affine))
        self.x_embed = MLP([dim_x, hidden, f], rng.child("x_embed"))
        self.cross = MultiheadAttention(f, heads, rng.child("cross"))
        if z_dim > 0:
            self.z_head = Linear(f, 2 * z_dim, rng.child("z_head"), init_scale=head_scale)

    def __call__(self, cx: Tensor, cy: Tensor, query_x: Tensor) -> EncoderOutput:
        if cx.shape[1] == 0:
            raise ContractError("cannot encode an empty context")
        pairs = concat([cx, cy], axis=-1)
        h = self.pair_embed(pairs)
        for i in range(self.n_blocks):
            h = getattr(self, f"sab{i}")(h)
        q = self.x_embed(query_x)
        k = self.x_embed(cx)
        r = self.cross(q, k, h)  # [B, n_target, F]
        z = None
        if self.z_dim > 0:
            zz = self.z_head(mean_over(h, axis=1))
            z = split_moments(zz, self.z_dim)
        return EncoderOutput(r=r, z=z)


def pool_dimensionwise(out: EncoderOutput, mode: str) -> PooledLatents:
    """Mean-pool r over the batch axis and z over the way axis.

    In regression way is 1, so z-pooling is the identity; the pooled r is
    shared by every task in the batch (leading axis 1, broadcastable).
    """
    if mode not in ("regression", "classification"):
        raise ContractError(f"unknown pooling mode '{mode}'")
    r_bar = mean_over(out.r, axis=0, keepdims=True)
    if mode == "regression":
        if out.per_way:
            raise ShapeError("regression pooling got per-way encoder output")
        return PooledLatents(r_bar=r_bar, z_bar=out.z, per_way=False)
    if not out.per_way:
        raise ShapeError("classification pooling needs per-way encoder output")
    z_bar = None
    if out.z is not None:
        z_bar = DiagonalGaussian(
            mean_over(out.z.mean, axis=1),
            mean_over(out.z.raw_scale, axis=1),
            out.z.transform,
        )
    return PooledLatents(r_bar=r_bar, z_bar=z_bar, per_way=True)

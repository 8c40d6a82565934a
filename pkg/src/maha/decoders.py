"""Decoders: the conventional rFF head over [T_x, r, z] and the linear decoder
that modulates target features with W = LN(r + rFF(z))^T."""

from __future__ import annotations

from .errors import ContractError, ShapeError
from .nn import MLP, LayerNorm, Module
from .tensor import Rng, Tensor, broadcast_to, concat, matmul, narrow, reshape, swap_last2
from .variational import BOUNDED_SOFTPLUS, DiagonalGaussian


class ConventionalDecoder(Module):
    """rFF over the concatenated [T_x, r, z]; emits mean and raw scale."""

    def __init__(self, dim_x: int, dim_y: int, r_width: int, z_dim: int,
                 hidden: int, depth: int, rng: Rng):
        self.dim_y = dim_y
        self.z_dim = z_dim
        dim_in = dim_x + r_width + z_dim
        self.ff = MLP([dim_in] + [hidden] * depth + [2 * dim_y], rng.child("ff"))

    def __call__(self, tx: Tensor, r: Tensor, z_value: Tensor | None) -> DiagonalGaussian:
        n_target = tx.shape[1]
        parts = [tx]
        if r.shape[1] == 1:
            r = broadcast_to(r, (tx.shape[0], n_target, r.shape[2]))
        elif r.shape[1] != n_target:
            raise ShapeError(f"r shot axis {r.shape[1]} incompatible with {n_target} targets")
        parts.append(r)
        if self.z_dim > 0:
            if z_value is None:
                raise ContractError("decoder built with a z path but no sample given")
            z3 = reshape(z_value, (z_value.shape[0], 1, z_value.shape[-1]))
            parts.append(broadcast_to(z3, (tx.shape[0], n_target, z_value.shape[-1])))
        out = self.ff(concat(parts, axis=-1))
        mu = narrow(out, -1, 0, self.dim_y)
        raw = narrow(out, -1, self.dim_y, self.dim_y)
        return DiagonalGaussian(mu, raw, BOUNDED_SOFTPLUS)


class LinearDecoder(Module):
    """Feature-wise linear map of extracted target features.

    W = LN(r + rFF(z))^T with r viewed as [*, rows, feature]; the product
    g(T_x) . W yields [batch, shot, rows]. Regression uses rows = 2*dim_y
    (mean and raw scale jointly); classification uses rows = way (logits).
    """

    def __init__(self, dim_x: int, feature_dim: int, z_dim: int, rows: int,
                 mode: str, hidden: int, rng: Rng, ln_affine: bool = True,
                 g_depth: int = 1):
        if mode not in ("regression", "classification"):
            raise ContractError(f"unknown linear decoder mode '{mode}'")
        self.mode = mode
        self.rows = rows
        self.feature_dim = feature_dim
        self.z_dim = z_dim
        self.dim_y = rows // 2 if mode == "regression" else 0
        self.g = MLP([dim_x] + [hidden] * g_depth + [feature_dim], rng.child("g"))
        if z_dim > 0:
            z_out = rows * feature_dim if mode == "regression" else feature_dim
            self.z_ff = MLP([z_dim, hidden, z_out], rng.child("z_ff"))
        self.ln = LayerNorm(feature_dim, affine=ln_affine)

    def weight_matrix(self, r: Tensor, z_value: Tensor | None) -> Tensor:
        """Compose W from the two latent paths; returns [*, feature, rows]."""
        if self.mode == "regression":
            rb = r.shape[0]
            r3 = reshape(r, (rb, self.rows, self.feature_dim))
            pre = r3
            if self.z_dim > 0:
                if z_value is None:
                    raise ContractError("linear decoder built with a z path but no sample given")
                zf = reshape(self.z_ff(z_value),
                             (z_value.shape[0], self.rows, self.feature_dim))
                pre = r3 + zf
        else:
            pre = r  # [*, way, F]
            if self.z_dim > 0:
                if z_value is None:
                    raise ContractError("linear decoder built with a z path but no sample given")
                if z_value.ndim == 2:  # shared (way-pooled) latent
                    zf = self.z_ff(reshape(z_value, (z_value.shape[0], 1, self.z_dim)))
                else:  # one latent per way
                    zf = self.z_ff(z_value)
                pre = r + zf
        return swap_last2(self.ln(pre))

    def __call__(self, tx: Tensor, r: Tensor, z_value: Tensor | None):
        w = self.weight_matrix(r, z_value)
        out = matmul(self.g(tx), w)  # [B, shot, rows]
        if self.mode == "classification":
            return out  # raw logits, width = way
        mu = narrow(out, -1, 0, self.dim_y)
        raw = narrow(out, -1, self.dim_y, self.dim_y)
        return DiagonalGaussian(mu, raw, BOUNDED_SOFTPLUS)

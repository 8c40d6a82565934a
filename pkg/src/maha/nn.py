"""Parameter containers, small layers, the Adam optimizer and checkpoint IO."""

from __future__ import annotations

import json
import os
from typing import Iterator

import numpy as np

from .errors import ContractError, NumericalError, ShapeError
from .tensor import Rng, Tensor, layer_norm, matmul, relu

CHECKPOINT_FORMAT_VERSION = 1


class Parameter:
    """A named trainable tensor; names are dotted paths unique within a model."""

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable
        self.name = ""  # filled in by Module.named_parameters

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def assign(self, data: np.ndarray) -> None:
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.tensor.data.shape:
            raise ShapeError(
                f"cannot assign shape {data.shape} to parameter of shape {self.tensor.data.shape}"
            )
        # fresh Tensor so graphs built before the update keep their old leaf
        self.tensor = Tensor(data, requires_grad=self.trainable)


class Module:
    """Composable parameter container with dotted-path naming."""

    def __setattr__(self, key, value):
        if isinstance(value, (Parameter, Module)):
            order = self.__dict__.setdefault("_order", [])
            if key not in order:
                order.append(key)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key in self.__dict__.get("_order", []):
            value = self.__dict__[key]
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            else:
                yield from value.named_parameters(prefix=f"{path}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            p.assign(np.asarray(state[name], dtype=np.float64))


def fan_in_uniform(rng: Rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


class Linear(Module):
    def __init__(self, dim_in: int, dim_out: int, rng: Rng, bias: bool = True,
                 init_scale: float = 1.0):
        self.w = Parameter(init_scale * fan_in_uniform(rng, dim_in, (dim_in, dim_out)))
        self.has_bias = bias
        if bias:
            self.b = Parameter(np.zeros(dim_out))

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w.tensor)
        if self.has_bias:
            out = out + self.b.tensor
        return out


class MLP(Module):
    """Row-wise feedforward stack: Linear -> relu -> ... -> Linear.

    out_scale shrinks the final layer's init so a freshly built stack starts
    near zero (used for encoder output heads)."""

    def __init__(self, dims: list[int], rng: Rng, out_scale: float = 1.0):
        if len(dims) < 2:
            raise ContractError("MLP needs at least input and output dims")
        self.n_layers = len(dims) - 1
        for i in range(self.n_layers):
            scale = out_scale if i == self.n_layers - 1 else 1.0
            setattr(self, f"lin{i}",
                    Linear(dims[i], dims[i + 1], rng.child("lin", i), init_scale=scale))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = getattr(self, f"lin{i}")(x)
            if i < self.n_layers - 1:
                x = relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True):
        self.affine = affine
        if affine:
            self.gain = Parameter(np.ones(dim))
            self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        if self.affine:
            return layer_norm(x, self.gain.tensor, self.bias.tensor)
        return layer_norm(x)


class Adam:
    """Standard Adam; deterministic given parameters, gradients and step count."""

    def __init__(self, params: list[Parameter], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient in parameter '{p.name or i}'")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.assign(p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str, model_kind: str, config: dict, model: Module) -> None:
    """Versioned JSON checkpoint; float repr round-trips all values bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_kind": model_kind,
        "config": config,
        "parameters": [
            {"name": name, "shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for name, p in model.named_parameters()
        ],
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format_version {doc.get('format_version')}")
    return doc


def restore_model(model: Module, doc: dict) -> None:
    state = {
        entry["name"]: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for entry in doc["parameters"]
    }
    model.load_state(state)

"""Trainable building blocks: graph convolution, causal TCN, LSTM stack, linear."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import AdjacencySet
from .tensor import Tensor, concat, matmul, mul, relu, reshape

PAD_VALUE = -1.0


class Module:
    """Minimal parameter container; children and parameters found by attribute scan."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True):
        self.training = mode
        for val in vars(self).values():
            children = val if isinstance(val, (list, tuple)) else [val]
            for child in children:
                if isinstance(child, Module):
                    child.train(mode)
        return self

    def eval(self):
        return self.train(False)


def _uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (n_in, n_out), n_in, "weight")
        self.bias = _uniform(rng, (n_out,), n_in, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = reshape(x, (-1, x.shape[-1]))
        y = matmul(flat, self.weight) + self.bias
        return reshape(y, lead + (self.weight.shape[1],))


class GcnLayer(Module):
    """Partitioned graph convolution with learnable edge importance, then ReLU.

    Input and output are joint-major features ``(N, M, C)`` for M frames.
    """

    def __init__(self, c_in: int, c_out: int, adjacency: AdjacencySet,
                 rng: np.random.Generator, bias: bool = True):
        n = adjacency.num_joints
        self.adjacency = adjacency
        self.normalized = np.stack(adjacency.normalized)  # (3, N, N)
        self.weight = _uniform(rng, (3, c_in, c_out), 3 * c_in, "weight")
        self.importance = Tensor(np.ones((3, n, n)), requires_grad=True, name="importance")
        self.bias = _uniform(rng, (c_out,), 3 * c_in, "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        N, M, C = x.shape
        if N != self.adjacency.num_joints:
            raise ValueError(f"expected {self.adjacency.num_joints} joints, got {N}")
        if C != self.weight.shape[1]:
            raise ValueError(f"expected {self.weight.shape[1]} input channels, got {C}")
        a_eff = mul(self.importance, self.normalized)
        out = ops.graph_conv(x, a_eff, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return relu(out)


class CausalConv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int,
                 rng: np.random.Generator):
        self.kernel = kernel
        self.dilation = dilation
        self.weight = _uniform(rng, (kernel, c_in, c_out), kernel * c_in, "weight")
        self.bias = _uniform(rng, (c_out,), kernel * c_in, "bias")

    @property
    def left_pad(self) -> int:
        return (self.kernel - 1) * self.dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.causal_conv1d(x, self.weight, self.bias, self.dilation)


@dataclass(frozen=True)
class EdTcnConfig:
    hidden: tuple[int, int] = (64, 96)
    kernel: int = 9
    dilations: tuple[int, int] = (1, 2)
    dropout: float = 0.3
    fc_hidden: int = 64
    pooling: str = "max"
    norm_relu: bool = True


class EdTcn(Module):
    """Encoder-decoder TCN head producing per-frame class logits.

    encoder: 2 x (causal conv -> (normalized) ReLU -> dropout -> pool /2)
    decoder: 2 x (upsample x2 -> causal conv -> (normalized) ReLU -> dropout)
    then FC -> ReLU -> FC.  Lengths not divisible by 4 are right-padded with
    ``PAD_VALUE`` and trimmed back.
    """

    def __init__(self, n_in: int, n_classes: int, config: EdTcnConfig,
                 rng: np.random.Generator):
        h1, h2 = config.hidden
        d1, d2 = config.dilations
        k = config.kernel
        self.config = config
        self.rng = rng
        self.encoder = [CausalConv1d(n_in, h1, k, d1, rng), CausalConv1d(h1, h2, k, d2, rng)]
        self.decoder = [CausalConv1d(h2, h2, k, d2, rng), CausalConv1d(h2, h1, k, d1, rng)]
        self.fc = Linear(h1, config.fc_hidden, rng)
        self.classifier = Linear(config.fc_hidden, n_classes, rng)

    def _act(self, x: Tensor) -> Tensor:
        x = ops.norm_relu(x) if self.config.norm_relu else relu(x)
        return ops.dropout(x, self.config.dropout, self.rng, self.training)

    def __call__(self, features: Tensor) -> Tensor:
        B, T, F = features.shape
        extra = (-T) % 4
        x = features
        if extra:
            x = concat([x, Tensor(np.full((B, extra, F), PAD_VALUE))], axis=1)
        for conv in self.encoder:
            x = ops.pool1d(self._act(conv(x)), self.config.pooling)
        for conv in self.decoder:
            x = self._act(conv(ops.upsample2(x)))
        logits = self.classifier(relu(self.fc(x)))
        if extra:
            logits = logits[:, :T]
        return logits


class RecurrentStack(Module):
    """Stacked unidirectional LSTM layers; returns the top layer's hidden sequence."""

    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_input, self.w_hidden, self.bias = [], [], []
        for layer in range(layers):
            fan = n_in if layer == 0 else hidden
            self.w_input.append(_uniform(rng, (fan, 4 * hidden), hidden, f"w_input{layer}"))
            self.w_hidden.append(_uniform(rng, (hidden, 4 * hidden), hidden, f"w_hidden{layer}"))
            self.bias.append(_uniform(rng, (4 * hidden,), hidden, f"bias{layer}"))

    @property
    def num_layers(self) -> int:
        return len(self.w_input)

    def __call__(self, x: Tensor) -> Tensor:
        for wi, wh, b in zip(self.w_input, self.w_hidden, self.bias):
            x = ops.lstm(x, wi, wh, b)
        return x

"""Parameterised layers built on the Tensor primitives.

Feature maps are laid out channels-first: a sequence of ``n`` tokens with
``d`` channels is a ``(d, n)`` tensor, and every layer here acts on the
channel axis independently per column, except attention, which mixes columns
without looking at their positions.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .exceptions import ConfigError, DataError, ShapeError
from .nn import Tensor, check_conv_config, concat, conv2d, layer_norm, softmax


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self._children: 'OrderedDict[str, Module]' = OrderedDict()

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        param = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self._params[name] = param
        return param

    def add_module(self, name: str, module: 'Module') -> 'Module':
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for child_name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> 'Module':
        """Convert every parameter in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise DataError(f"checkpoint is missing parameter(s): {', '.join(missing[:5])}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {value.shape}, model shape {param.shape}")
            param.data = np.ascontiguousarray(value, dtype=param.dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """Affine map of the channel axis of a (d_in, n) input."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = self.add_param('weight', rng.uniform(-bound, bound, size=(d_out, d_in)))
        self.bias = self.add_param('bias', rng.uniform(-bound, bound, size=(d_out,)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return (self.weight @ x.reshape(-1, 1)).reshape(-1) + self.bias
        return self.weight @ x + self.bias.reshape(-1, 1)


class Conv2d(Module):
    """Width-preserving convolution over a (c_in, h, w) feature map."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: Tuple[int, int],
        stride: Tuple[int, int],
        rng: np.random.Generator,
        width_padding: str = 'circular',
    ):
        super().__init__()
        kh, kw = kernel
        check_conv_config(kw, stride, width_padding)
        self.stride = stride
        self.width_padding = width_padding
        fan_in = c_in * kh * kw
        self.weight = self.add_param('weight', rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, kh, kw)))
        self.bias = self.add_param('bias', np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.width_padding)


class LayerNorm(Module):
    """Per-column normalisation over channels with a learned scale and shift."""

    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param('gamma', np.ones(d))
        self.beta = self.add_param('beta', np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, axis=0, eps=self.eps) * self.gamma.reshape(-1, 1) + self.beta.reshape(-1, 1)


@dataclass
class AttentionConfig:
    d: int
    heads: int = 4

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def validate(self) -> 'AttentionConfig':
        if self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"{self.heads} heads do not divide model dim {self.d}")
        return self


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention without positional encoding."""

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg.validate()
        self.q = self.add_module('q', Linear(cfg.d, cfg.d, rng))
        self.k = self.add_module('k', Linear(cfg.d, cfg.d, rng))
        self.v = self.add_module('v', Linear(cfg.d, cfg.d, rng))
        self.out = self.add_module('out', Linear(cfg.d, cfg.d, rng))

    def forward(self, x: Tensor) -> Tensor:
        d_k = self.cfg.d_k
        q, k, v = self.q(x), self.k(x), self.v(x)
        scale = 1.0 / math.sqrt(d_k)
        heads = []
        for h in range(self.cfg.heads):
            rows = slice(h * d_k, (h + 1) * d_k)
            scores = (q[rows].T @ k[rows]) * scale  # (n, n), row = query column
            attn = softmax(scores, axis=1)
            heads.append(v[rows] @ attn.T)
        return self.out(concat(heads, axis=0))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.add_module('fc1', Linear(d, hidden, rng))
        self.fc2 = self.add_module('fc2', Linear(hidden, d, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).relu())


class TransformerBlock(Module):
    """MHSA, residual, LayerNorm, FFN, residual, LayerNorm."""

    def __init__(self, cfg: AttentionConfig, ffn_mult: int, rng: np.random.Generator):
        super().__init__()
        self.attention = self.add_module('attention', MultiHeadSelfAttention(cfg, rng))
        self.norm1 = self.add_module('norm1', LayerNorm(cfg.d))
        self.ffn = self.add_module('ffn', FeedForward(cfg.d, ffn_mult * cfg.d, rng))
        self.norm2 = self.add_module('norm2', LayerNorm(cfg.d))

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x + self.attention(x))
        return self.norm2(y + self.ffn(y))


class PointwiseConvBlock(Module):
    """Two 1x1 convolutions with unchanged channel count, used in place of a transformer."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self.add_module('conv1', Linear(d, d, rng))
        self.conv2 = self.add_module('conv2', Linear(d, d, rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(x).relu())

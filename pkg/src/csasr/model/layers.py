"""Parameterised building blocks: linear, norms, attention, conformer and decoder blocks."""

from __future__ import annotations

import math
import zlib
from typing import Iterator, Optional

import numpy as np

from csasr.numerics import ops
from csasr.numerics.tensor import Tensor


class Context:
    """Per-forward settings: dropout rate and the RNG that draws dropout masks.

    ``rng=None`` means evaluation mode (no dropout).
    """

    def __init__(self, rng: Optional[np.random.Generator] = None, rate: float = 0.0):
        self.rng = rng
        self.rate = rate if rng is not None else 0.0

    def dropout(self, x: Tensor) -> Tensor:
        if self.rate <= 0.0:
            return x
        mask = self.rng.random(x.shape) >= self.rate
        return ops.dropout(x, mask, self.rate)


EVAL = Context()


class Module:
    """Container of named parameters and child modules, in registration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._init: dict[str, tuple] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, shape, init: str, fan_in: int = 1) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True)
        self._params[name] = t
        self._init[name] = (init, fan_in)
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for name, m in self._children.items():
            yield from m.named_parameters(prefix + name + ".")

    def named_inits(self, prefix: str = ""):
        for name, spec in self._init.items():
            yield prefix + name, spec
        for name, m in self._children.items():
            yield from m.named_inits(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def param_seed(root_seed: int, name: str) -> np.random.SeedSequence:
    """Each parameter draws from its own stream so adding or removing modules
    never shifts the initial values of the others."""
    return np.random.SeedSequence([root_seed, zlib.crc32(name.encode())])


def initialize(module: Module, seed: int) -> None:
    params = dict(module.named_parameters())
    for name, (kind, fan_in) in module.named_inits():
        t = params[name]
        if kind == "zeros":
            t.data = np.zeros(t.shape)
        elif kind == "ones":
            t.data = np.ones(t.shape)
        elif kind == "uniform":
            bound = 1.0 / math.sqrt(fan_in)
            t.data = np.random.default_rng(param_seed(seed, name)).uniform(-bound, bound, size=t.shape)
        else:
            raise ValueError(f"unknown init {kind!r} for {name}")


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", (n_in, n_out), "uniform", n_in)
        self.bias = self.param("bias", (n_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = self.param("gain", (d,), "ones")
        self.bias = self.param("bias", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, n: int, d: int):
        super().__init__()
        self.table = self.param("table", (n, d), "uniform", d)

    def __call__(self, ids) -> Tensor:
        return ops.embedding_lookup(self.table, ids)


def sinusoid_table(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d, 2) * -(math.log(10000.0) / d))
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d // 2]
    return pe


def add_positions(x: Tensor) -> Tensor:
    """Scale by sqrt(D) and add absolute sinusoidal encodings over axis 1."""
    _, t, d = x.shape
    return ops.add(ops.scale(x, math.sqrt(d)), ops.constant(sinusoid_table(t, d)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = self.child("q", Linear(d, d))
        self.k = self.child("k", Linear(d, d))
        self.v = self.child("v", Linear(d, d))
        self.o = self.child("o", Linear(d, d))

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, keep: np.ndarray, ctx: Context):
        """``keep`` broadcasts to ``(B, Tq, Tk)``; True marks attendable keys.

        Returns the output and the attention probabilities ``(B, H, Tq, Tk)``.
        """
        b, tq, d = query.shape
        dk = d // self.heads
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        scores = ops.masked_fill(scores, ~keep[:, None], -1e30)
        probs = ops.softmax(scores)
        ctxv = ops.matmul(probs, v)
        merged = ops.reshape(ops.transpose(ctxv, (0, 2, 1, 3)), (b, tq, d))
        return self.o(merged), probs.data


class FeedForward(Module):
    def __init__(self, d: int, ff: int, activation):
        super().__init__()
        self.w1 = self.child("w1", Linear(d, ff))
        self.w2 = self.child("w2", Linear(ff, d))
        self.activation = activation

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        return self.w2(ctx.dropout(self.activation(self.w1(x))))


class ConvModule(Module):
    """Pointwise conv + GLU, depthwise conv, norm, swish, pointwise conv."""

    def __init__(self, d: int, kernel: int):
        super().__init__()
        self.d = d
        self.pw1 = self.child("pw1", Linear(d, 2 * d))
        self.dw_weight = self.param("dw_weight", (kernel, d), "uniform", kernel)
        self.dw_bias = self.param("dw_bias", (d,), "zeros")
        self.norm = self.child("norm", LayerNorm(d))
        self.pw2 = self.child("pw2", Linear(d, d))

    def __call__(self, x: Tensor, frame_keep: np.ndarray) -> Tensor:
        a, gate = ops.split(self.pw1(x), [self.d, self.d])
        y = ops.mul(a, ops.sigmoid(gate))
        # padded frames must not leak into valid ones through the kernel
        y = ops.masked_fill(y, ~frame_keep[:, :, None], 0.0)
        y = ops.depthwise_conv1d(y, self.dw_weight, self.dw_bias)
        return self.pw2(ops.swish(self.norm(y)))


class ConformerBlock(Module):
    """Macaron FFN / self-attention / convolution / FFN with pre-norm residuals."""

    def __init__(self, d: int, heads: int, ff: int, kernel: int):
        super().__init__()
        self.ff1_norm = self.child("ff1_norm", LayerNorm(d))
        self.ff1 = self.child("ff1", FeedForward(d, ff, ops.swish))
        self.att_norm = self.child("att_norm", LayerNorm(d))
        self.att = self.child("att", MultiHeadAttention(d, heads))
        self.conv_norm = self.child("conv_norm", LayerNorm(d))
        self.conv = self.child("conv", ConvModule(d, kernel))
        self.ff2_norm = self.child("ff2_norm", LayerNorm(d))
        self.ff2 = self.child("ff2", FeedForward(d, ff, ops.swish))
        self.out_norm = self.child("out_norm", LayerNorm(d))

    def __call__(self, x: Tensor, frame_keep: np.ndarray, ctx: Context) -> Tensor:
        x = ops.add(x, ops.scale(ctx.dropout(self.ff1(self.ff1_norm(x), ctx)), 0.5))
        h = self.att_norm(x)
        a, _ = self.att(h, h, frame_keep[:, None, :], ctx)
        x = ops.add(x, ctx.dropout(a))
        x = ops.add(x, ctx.dropout(self.conv(self.conv_norm(x), frame_keep)))
        x = ops.add(x, ops.scale(ctx.dropout(self.ff2(self.ff2_norm(x), ctx)), 0.5))
        return self.out_norm(x)


class DecoderBlock(Module):
    """Pre-norm transformer decoder layer; ``cross=False`` drops source attention (LM use)."""

    def __init__(self, d: int, heads: int, ff: int, cross: bool = True):
        super().__init__()
        self.self_norm = self.child("self_norm", LayerNorm(d))
        self.self_att = self.child("self_att", MultiHeadAttention(d, heads))
        self.cross = cross
        if cross:
            self.src_norm = self.child("src_norm", LayerNorm(d))
            self.src_att = self.child("src_att", MultiHeadAttention(d, heads))
        self.ff_norm = self.child("ff_norm", LayerNorm(d))
        self.ff = self.child("ff", FeedForward(d, ff, ops.gelu))

    def __call__(self, x, self_keep, memory, mem_keep, ctx: Context):
        h = self.self_norm(x)
        a, _ = self.self_att(h, h, self_keep, ctx)
        x = ops.add(x, ctx.dropout(a))
        probs = None
        if self.cross:
            a, probs = self.src_att(self.src_norm(x), memory, mem_keep, ctx)
            x = ops.add(x, ctx.dropout(a))
        x = ops.add(x, ctx.dropout(self.ff(self.ff_norm(x), ctx)))
        return x, probs


class Subsampler(Module):
    """Strided 1-D convolutions over time (kernel 3, stride 2) then a linear map to D.

    Each stage maps ``T -> T // 2``; the factor-4 stack gives ``T1 = T // 4``.
    """

    def __init__(self, n_in: int, d: int, factor: int):
        super().__init__()
        self.stages = []
        c = n_in
        for i in range({1: 0, 2: 1, 4: 2}[factor]):
            self.stages.append(self.child(f"conv{i}", Linear(3 * c, d)))
            c = d
        self.out = self.child("out", Linear(c, d))

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.stages:
            x = ops.relu(conv(ops.unfold_time(x, kernel=3, stride=2, pad_left=1)))
        return self.out(x)

    @staticmethod
    def out_length(n: int, factor: int) -> int:
        for _ in range({1: 0, 2: 1, 4: 2}[factor]):
            n //= 2
        return n

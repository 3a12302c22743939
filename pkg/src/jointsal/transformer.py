"""Pre-norm Transformer encoder over the patch sequence."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .autodiff import Tensor
from .backbone import PatchSequence, unflatten_tokens
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module


class MultiHeadSelfAttention(Module):
    """Bidirectional scaled dot-product attention split across heads.

    Query/key/value projections are stored as full ``D x D`` maps whose
    output columns are partitioned into heads.
    """

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"embedding width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.last_attention = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, e: Tensor) -> Tensor:
        return mhsa(e, self)


def mhsa(e: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    B, L, D = e.shape
    if D != params.query.weight.shape[0]:
        raise DimensionError(f"mhsa expects width {params.query.weight.shape[0]}, got {e.shape}")
    head_dim = D // params.heads
    q = params._split(params.query(e))
    k = params._split(params.key(e))
    v = params._split(params.value(e))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
    attn = ops.softmax(scores, axis=-1)  # [B, h, L, L]
    params.last_attention = attn.data
    mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    return params.out(mixed)


class EncoderBlock(Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def __call__(self, e: Tensor) -> Tensor:
        e_star = self.attn(self.norm1(e)) + e
        return self.fc2(ops.gelu(self.fc1(self.norm2(e_star)))) + e_star


class TransformerEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, depth: int | None = None):
        depth = cfg.depth if depth is None else depth
        if depth < 1:
            raise ConfigError("the Transformer stack needs at least one block")
        self.blocks = [EncoderBlock(rng, cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(cfg.embed_dim)

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        """Blocks plus final layer norm, still in token layout."""
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)

    def __call__(self, seq: PatchSequence) -> Tensor:
        """Global feature ``[B, D, H4, W4]``."""
        return unflatten_tokens(self.encode_tokens(seq.tokens), seq.origin_hw)


def transformer_forward(seq: PatchSequence, blocks, final_ln) -> Tensor:
    if len(blocks) < 1:
        raise ConfigError("the Transformer stack needs at least one block")
    tokens = seq.tokens
    for block in blocks:
        tokens = block(tokens)
    return unflatten_tokens(final_ln(tokens), seq.origin_hw)

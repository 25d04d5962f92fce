"""Age/location embeddings, conditioned self-attention and feature modulation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import BadSpec, CoordOutOfRange, ShapeError, UnknownAge

TOKEN_SETS = ("age", "age+loc")


@dataclass
class ConSAConfig:
    in_channels: int
    hid_dim: int = 64
    heads: int = 4
    dropout: float = 0.1
    residual: bool = False
    prenorm: bool = True

    def __post_init__(self):
        if self.hid_dim % self.heads:
            raise BadSpec(f"hid_dim {self.hid_dim} is not divisible by heads {self.heads}")
        if self.in_channels < 1:
            raise BadSpec(f"in_channels must be positive, got {self.in_channels}")


@dataclass
class ConditionContext:
    age_vec: torch.Tensor  # [B, hid]
    loc_vec: torch.Tensor | None  # [B, hid]; None for age-only encoders
    age_index: torch.Tensor  # [B]
    rel_center: torch.Tensor  # [B, 3]

    def tokens(self, which: str = "age+loc") -> torch.Tensor:
        """Condition tokens [B, T, hid] in prepend order."""
        if which == "age":
            return self.age_vec[:, None, :]
        if self.loc_vec is None:
            raise ShapeError("no location vector in this context")
        return torch.stack([self.age_vec, self.loc_vec], dim=1)

    def vector(self, which: str = "age+loc") -> torch.Tensor:
        if which == "age":
            return self.age_vec
        if self.loc_vec is None:
            raise ShapeError("no location vector in this context")
        return torch.cat([self.age_vec, self.loc_vec], dim=-1)


def mlp(in_dim: int, hid_dim: int, out_dim: int) -> nn.Sequential:
    # smooth activation keeps finite-difference checks well conditioned
    return nn.Sequential(nn.Linear(in_dim, hid_dim), nn.GELU(), nn.Linear(hid_dim, out_dim))


class ConditionEncoder(nn.Module):
    """Maps a discrete age index and a relative crop centre to two hid_dim vectors.

    The age branch is a learned lookup row followed by an MLP; the location
    branch is an MLP over (x*, y*, z*). Age-only conditioning drops the
    location branch so it carries no unused parameters.
    """

    def __init__(self, hid_dim: int = 64, num_ages: int = 4, location: bool = True):
        super().__init__()
        self.hid_dim = hid_dim
        self.num_ages = num_ages
        self.age_table = nn.Embedding(num_ages, hid_dim)
        self.age_mlp = mlp(hid_dim, hid_dim, hid_dim)
        self.loc_mlp = mlp(3, hid_dim, hid_dim) if location else None

    def embed_age(self, age_index: torch.Tensor) -> torch.Tensor:
        age_index = torch.as_tensor(age_index, dtype=torch.long, device=self.age_table.weight.device)
        if age_index.numel() and (age_index.min() < 0 or age_index.max() >= self.num_ages):
            raise UnknownAge(f"age index outside 0..{self.num_ages - 1}: {age_index.tolist()}")
        return self.age_mlp(self.age_table(age_index))

    def embed_location(self, rel_center: torch.Tensor) -> torch.Tensor:
        if self.loc_mlp is None:
            raise BadSpec("this encoder was built without a location branch")
        rel_center = torch.as_tensor(rel_center, dtype=self.age_table.weight.dtype, device=self.age_table.weight.device)
        if rel_center.shape[-1] != 3:
            raise ShapeError(f"relative centre must have 3 components, got {tuple(rel_center.shape)}")
        if rel_center.numel() and (rel_center.min() < 0 or rel_center.max() > 1):
            raise CoordOutOfRange("relative centre coordinates must lie in [0, 1]")
        return self.loc_mlp(rel_center)

    def forward(self, age_index: torch.Tensor, rel_center: torch.Tensor) -> ConditionContext:
        age_index = torch.as_tensor(age_index, dtype=torch.long, device=self.age_table.weight.device)
        rel_center = torch.as_tensor(rel_center, dtype=self.age_table.weight.dtype, device=self.age_table.weight.device)
        return ConditionContext(
            age_vec=self.embed_age(age_index),
            loc_vec=self.embed_location(rel_center) if self.loc_mlp is not None else None,
            age_index=age_index,
            rel_center=rel_center,
        )


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise BadSpec(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def attention_weights(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return scores.softmax(dim=-1)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, N, D = x.shape
        q, k, v = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        weights = self.attention_weights(q, k)
        y = (self.drop(weights) @ v).transpose(1, 2).reshape(B, N, D)
        y = self.out(y)
        return (y, weights) if return_weights else y


class ConSA(nn.Module):
    """Conditioned self-attention over bottleneck feature tokens.

    Features [B, c, h, w] are projected to hid_dim by a 1x1 convolution and
    flattened to h*w tokens. The condition tokens are prepended, the sequence
    goes through multi-head self-attention, the condition tokens are dropped
    and the rest is reshaped and projected back to c channels.
    """

    def __init__(self, cfg: ConSAConfig):
        super().__init__()
        self.cfg = cfg
        self.proj_in = nn.Conv2d(cfg.in_channels, cfg.hid_dim, 1)
        self.norm = nn.LayerNorm(cfg.hid_dim) if cfg.prenorm else nn.Identity()
        self.attn = SelfAttention(cfg.hid_dim, cfg.heads, cfg.dropout)
        self.proj_out = nn.Conv2d(cfg.hid_dim, cfg.in_channels, 1)
        self.last_weights: torch.Tensor | None = None

    def forward(self, features: torch.Tensor, cond_tokens: torch.Tensor, keep_weights: bool = False) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B, {self.cfg.in_channels}, h, w] features, got {tuple(features.shape)}")
        B, _, h, w = features.shape
        if cond_tokens.ndim != 3 or cond_tokens.shape[0] != B or cond_tokens.shape[2] != self.cfg.hid_dim:
            raise ShapeError(f"expected [{B}, T, {self.cfg.hid_dim}] condition tokens, got {tuple(cond_tokens.shape)}")
        n_cond = cond_tokens.shape[1]
        x = self.proj_in(features).flatten(2).transpose(1, 2)
        tokens = torch.cat([cond_tokens.to(x.dtype), x], dim=1)
        y, weights = self.attn(self.norm(tokens), return_weights=True)
        self.last_weights = weights.detach() if keep_weights else None
        y = y[:, n_cond:].transpose(1, 2).reshape(B, self.cfg.hid_dim, h, w)
        out = self.proj_out(y)
        return out + features if self.cfg.residual else out


class FiLMGenerator(nn.Module):
    """Predicts per-channel (gamma, beta) from the concatenated condition vectors."""

    def __init__(self, cond_dim: int, channels: int, hid_dim: int = 64):
        super().__init__()
        self.channels = channels
        self.net = mlp(cond_dim, hid_dim, 2 * channels)
        last = self.net[-1]
        with torch.no_grad():
            last.weight.mul_(0.1)
            last.bias.zero_()
            last.bias[:channels] = 1.0

    def forward(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        gamma, beta = self.net(cond).chunk(2, dim=-1)
        return gamma, beta


def film_apply(features: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine modulation ``gamma[c] * F[c] + beta[c]``.

    ``features`` is [C, h, w] or [B, C, h, w]; gamma/beta are [C] or [B, C].
    """
    C = features.shape[-3]
    if gamma.shape[-1] != C or beta.shape[-1] != C:
        raise ShapeError(f"modulation length {gamma.shape[-1]}/{beta.shape[-1]} != channels {C}")
    return gamma[..., None, None] * features + beta[..., None, None]


class FiLM(nn.Module):
    def __init__(self, cond_dim: int, channels: int, hid_dim: int = 64):
        super().__init__()
        self.generator = FiLMGenerator(cond_dim, channels, hid_dim)

    def forward(self, features: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.generator(cond)
        return film_apply(features, gamma, beta)


# -- functional surface ------------------------------------------------------


def embed_age(age_index, encoder: ConditionEncoder) -> torch.Tensor:
    return encoder.embed_age(torch.as_tensor(age_index))


def embed_location(rel_center, encoder: ConditionEncoder) -> torch.Tensor:
    return encoder.embed_location(torch.as_tensor(rel_center))


def consa_forward(features: torch.Tensor, ctx: ConditionContext, block: ConSA, tokens: str = "age+loc") -> torch.Tensor:
    """Unbatched convenience wrapper: [c, h, w] in, [c, h, w] out."""
    squeeze = features.ndim == 3
    if squeeze:
        features = features[None]
    cond = ctx.tokens(tokens)
    if cond.shape[0] != features.shape[0]:
        cond = cond.expand(features.shape[0], -1, -1)
    out = block(features, cond)
    return out[0] if squeeze else out


def film_params(ctx: ConditionContext, generator: FiLMGenerator, tokens: str = "age+loc"):
    cond = ctx.vector(tokens)
    gamma, beta = generator(cond)
    if gamma.shape[-1] != generator.channels:
        raise ShapeError("generator output does not match its channel count")
    return gamma, beta

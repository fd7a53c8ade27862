"""The three branch encoders: tabular transformer, text transformer, and a
vision transformer that can surface its attention tensors for visualization.

Desk-scale dimensions (d_model 64, 2 layers, 2 heads) keep CPU training in
the minutes range; load_state_dict is the hook for substituting externally
trained encoder weights of the same shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .domain import ImageBuffer
from .ingestion import CLS_ID, PAD_ID, Vocabulary, words_of


class IdOutOfRange(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    max_len: int = 64
    patch_size: int = 8
    image_size: int = 64
    cat_vocab_sizes: tuple[int, ...] = ()
    n_continuous: int = 0
    text_vocab_size: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "patch_size": self.patch_size,
            "image_size": self.image_size,
            "cat_vocab_sizes": list(self.cat_vocab_sizes),
            "n_continuous": self.n_continuous,
            "text_vocab_size": self.text_vocab_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["cat_vocab_sizes"] = tuple(d.get("cat_vocab_sizes", ()))
        return cls(**d)


@dataclass(frozen=True)
class AttentionTrace:
    """Post-softmax image-attention tensors, one (n_heads, T, T) array per
    layer in forward order; T = n_patches + 1 with the class token first."""

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("trace must contain at least one layer")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def seq_len(self) -> int:
        return self.layers[0].shape[-1]


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS] + word ids (UNK for OOV), truncated then right-padded to max_len."""
    ids = [CLS_ID] + [vocab.id_of(w) for w in words_of(text)]
    ids = ids[:max_len]
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return np.asarray(ids, dtype=np.int64)


def patchify(image: ImageBuffer, patch_size: int) -> np.ndarray:
    """Non-overlapping row-major patches, each flattened to patch_size^2 * 3
    values scaled to [0, 1]."""
    if image.height != image.width or image.height % patch_size != 0:
        raise DimensionMismatch(
            f"image must be square with side divisible by {patch_size}, got {image.height}x{image.width}"
        )
    g = image.height // patch_size
    px = image.pixels.astype(np.float32) / 255.0
    patches = (
        px.reshape(g, patch_size, g, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch_size * patch_size * 3)
    )
    return patches


def init_parameters(module: nn.Module, seed: int) -> None:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for every weight,
    deterministic in seed; LayerNorm keeps its (1, 0) default."""
    gen = torch.Generator().manual_seed(seed)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if "norm" in name.lower() or param.ndim == 0:
            continue
        if param.ndim >= 2:
            fan_in = param.shape[-1] if "embed" in name or "cls_token" in name else param.shape[1]
        else:
            fan_in = param.shape[0]
        bound = 1.0 / math.sqrt(max(1, fan_in))
        with torch.no_grad():
            param.uniform_(-bound, bound, generator=gen)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(
        self, x: torch.Tensor, key_padding_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (B, T, D); key_padding_mask: (B, T) bool, True = masked.

        Returns (output, attention) with attention (B, n_heads, T, T) post-softmax.
        """
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.unbind(dim=2)  # each (B, T, H, Hd)
        q = q.transpose(1, 2)
        k = k.transpose(1, 2)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        out = self.drop(attn) @ v
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.out(out), attn


class TransformerBlock(nn.Module):
    """Pre-norm block with GELU feed-forward."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.d_model),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask=None):
        attn_out, attn = self.attn(self.norm1(x), key_padding_mask)
        x = x + self.drop(attn_out)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x, attn


class TabularEncoder(nn.Module):
    """Categorical tokens contextualized by self-attention, flattened and
    joined with layer-normalized continuous features, projected to d_model."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.field_embeds = nn.ModuleList(
            nn.Embedding(size, cfg.d_model) for size in cfg.cat_vocab_sizes
        )
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.cat_norm = nn.LayerNorm(cfg.d_model)
        self.cont_norm = nn.LayerNorm(cfg.n_continuous) if cfg.n_continuous else None
        self.register_buffer("cont_mean", torch.zeros(cfg.n_continuous))
        self.register_buffer("cont_std", torch.ones(cfg.n_continuous))
        n_fields = len(cfg.cat_vocab_sizes)
        self.proj = nn.Linear(n_fields * cfg.d_model + cfg.n_continuous, cfg.d_model)

    def forward(self, continuous: torch.Tensor, categorical_ids: torch.Tensor) -> torch.Tensor:
        b = continuous.shape[0]
        parts = []
        if self.field_embeds:
            for i, emb in enumerate(self.field_embeds):
                ids = categorical_ids[:, i]
                if bool((ids < 0).any()) or bool((ids >= emb.num_embeddings).any()):
                    raise IdOutOfRange(
                        f"categorical field {i} id outside [0, {emb.num_embeddings})"
                    )
            tokens = torch.stack(
                [emb(categorical_ids[:, i]) for i, emb in enumerate(self.field_embeds)], dim=1
            )
            for block in self.blocks:
                tokens, _ = block(tokens)
            tokens = self.cat_norm(tokens)
            parts.append(tokens.reshape(b, -1))
        if self.cont_norm is not None:
            std = torch.where(self.cont_std > 0, self.cont_std, torch.ones_like(self.cont_std))
            parts.append(self.cont_norm((continuous - self.cont_mean) / std))
        return self.proj(torch.cat(parts, dim=1))


class TextEncoder(nn.Module):
    """Token + learned positional embeddings into a PAD-masked transformer;
    the class-token position is the branch embedding."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embed = nn.Embedding(cfg.text_vocab_size, cfg.d_model)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.max_len, cfg.d_model))
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if bool((token_ids < 0).any()) or bool((token_ids >= self.token_embed.num_embeddings).any()):
            raise IdOutOfRange(f"token id outside [0, {self.token_embed.num_embeddings})")
        t = token_ids.shape[1]
        x = self.token_embed(token_ids) + self.pos_embed[:t]
        mask = token_ids == PAD_ID
        for block in self.blocks:
            x, _ = block(x, key_padding_mask=mask)
        return self.final_norm(x[:, 0])


class VisionEncoder(nn.Module):
    """Patch embeddings + class token through a transformer; optionally
    captures every layer's post-softmax attention for saliency rollout."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.patch_embed = nn.Linear(patch_dim, cfg.d_model)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.d_model))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_patches + 1, cfg.d_model))
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.register_buffer("channel_mean", torch.zeros(3))
        self.register_buffer("channel_std", torch.ones(3))

    def forward(
        self, patches: torch.Tensor, capture_attention: bool = False
    ) -> tuple[torch.Tensor, list[torch.Tensor] | None]:
        """patches: (B, P, patch_dim) in [0, 1] as produced by patchify."""
        b, p, dim = patches.shape
        if p != self.cfg.n_patches or dim != self.cfg.patch_size**2 * 3:
            raise DimensionMismatch(
                f"expected ({self.cfg.n_patches}, {self.cfg.patch_size ** 2 * 3}) patches, got ({p}, {dim})"
            )
        std = torch.where(self.channel_std > 0, self.channel_std, torch.ones_like(self.channel_std))
        x = (patches.reshape(b, p, -1, 3) - self.channel_mean) / std
        x = self.patch_embed(x.reshape(b, p, dim))
        cls = self.cls_token.expand(b, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        traces: list[torch.Tensor] | None = [] if capture_attention else None
        for block in self.blocks:
            x, attn = block(x)
            if traces is not None:
                traces.append(attn)
        return self.final_norm(x[:, 0]), traces


def trace_from_tensors(layer_attns: Sequence[torch.Tensor], batch_index: int = 0) -> AttentionTrace:
    return AttentionTrace(
        layers=tuple(a[batch_index].detach().cpu().numpy().astype(np.float32) for a in layer_attns)
    )

"""Attention building blocks shared by the encoders, experts and aggregators."""

import math

import torch
import torch.nn as nn


def trunc_normal_init(module, std=0.02):
    """Truncated-normal weights and zero biases for every Linear/Embedding in ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)


class Attention(nn.Module):
    """Scaled dot-product attention with bias-free W_q, W_k, W_v and no output projection.

    With ``heads=1`` this is exactly ``softmax(W_q x (W_k c)^T / sqrt(D)) W_v c``.
    """

    def __init__(self, dim, heads=1):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} not divisible by heads={heads}")
        self.dim = dim
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def forward(self, query, context, context_mask=None, return_weights=False):
        # query [B, Lq, D], context [B, Lc, D], context_mask [B, Lc] (True = valid)
        B, Lq, D = query.shape
        Lc = context.shape[1]
        h, dh = self.heads, D // self.heads
        q = self.w_q(query).view(B, Lq, h, dh).transpose(1, 2)
        k = self.w_k(context).view(B, Lc, h, dh).transpose(1, 2)
        v = self.w_v(context).view(B, Lc, h, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if context_mask is not None:
            logits = logits.masked_fill(~context_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, D)
        if return_weights:
            return out, weights
        return out


class Mlp(nn.Sequential):
    """Two-layer projection, hidden width ``ratio * dim``, exact GELU."""

    def __init__(self, dim, ratio=4):
        super().__init__(nn.Linear(dim, ratio * dim), nn.GELU(), nn.Linear(ratio * dim, dim))

    @property
    def out_proj(self):
        return self[2]


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: ``x + Attn(LN x)`` then ``x + MLP(LN x)``."""

    def __init__(self, dim, heads=1):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.mlp(self.norm2(x))


class AttentiveBlock(nn.Module):
    """``x + MLP(LN(Attn(x, context)))``.

    Used with an external context (explanation experts) and with ``context=x``
    (attention-based aggregation).
    """

    def __init__(self, dim, heads=1):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x, context=None, context_mask=None, return_weights=False):
        if context is None:
            context = x
        attended, weights = self.attn(x, context, context_mask, return_weights=True)
        out = x + self.mlp(self.norm(attended))
        if return_weights:
            return out, weights
        return out

    def zero_mlp_output(self):
        nn.init.zeros_(self.mlp.out_proj.weight)
        nn.init.zeros_(self.mlp.out_proj.bias)

"""Collapse expert feature sets into one vector per sample, and the gated image-text fusion.

All weighted sums run left to right over the expert axis (``acc = acc + w_i * F_i``),
so uniform gating reproduces the average bit for bit.
"""

import torch
import torch.nn as nn

from .layers import AttentiveBlock, trunc_normal_init
from .mmae import FeatureSet
from .objectives import match_head

STRATEGIES = ("avg", "attn", "aga")


def _rows(F):
    return F.vectors if isinstance(F, FeatureSet) else torch.as_tensor(F)


def weighted_sum(rows, weights):
    """``sum_i weights[..., i] * rows[..., i, :]`` accumulated in expert order."""
    acc = weights[..., 0:1] * rows[..., 0, :]
    for i in range(1, rows.shape[-2]):
        acc = acc + weights[..., i : i + 1] * rows[..., i, :]
    return acc


def uniform_weights(rows):
    count = rows.shape[-2]
    return torch.full(rows.shape[:-2] + (count,), 1.0 / count, dtype=rows.dtype, device=rows.device)


def aggregate_average(F):
    rows = _rows(F)
    if rows.shape[-2] == 0:
        raise ValueError("cannot average an empty feature set")
    return weighted_sum(rows, uniform_weights(rows))


def aggregate_attention(F, token, block):
    """Prepend ``token`` to the feature rows, run one attentive block, return the token position."""
    rows = _rows(F)
    if rows.shape[-2] == 0:
        raise ValueError("cannot aggregate an empty feature set")
    if token.shape[-1] != rows.shape[-1]:
        raise ValueError(f"token dim {token.shape[-1]} != feature dim {rows.shape[-1]}")
    single = rows.dim() == 2
    if single:
        rows = rows.unsqueeze(0)
    seq = torch.cat([token.expand(rows.shape[0], 1, -1), rows], dim=1)
    out = block(seq)[:, 0]
    return out[0] if single else out


def aggregate_gated(F, cls_vec, W):
    """``weights = softmax(cls_vec @ W)``; returns ``(sum_i weights_i * F_i, weights)``."""
    rows = _rows(F)
    if W.shape != (rows.shape[-1], rows.shape[-2]):
        raise ValueError(f"gating matrix shape {tuple(W.shape)} != ({rows.shape[-1]}, {rows.shape[-2]})")
    weights = torch.softmax(cls_vec @ W, dim=-1)
    return weighted_sum(rows, weights), weights


def fuse_multimodal(V_F, T_F, V_cls, T_cls, W_mm):
    """Gated fusion of the stacked ``[V_F; T_F]`` rows conditioned on ``[V_cls, T_cls]``."""
    rows = torch.cat([_rows(V_F), _rows(T_F)], dim=-2)
    D, count = rows.shape[-1], rows.shape[-2]
    if W_mm.shape != (2 * D, count):
        raise ValueError(f"W_mm shape {tuple(W_mm.shape)} != ({2 * D}, {count})")
    weights = torch.softmax(torch.cat([V_cls, T_cls], dim=-1) @ W_mm, dim=-1)
    return weighted_sum(rows, weights), weights


class Aggregator(nn.Module):
    """Image and text aggregation with one of ``avg``, ``attn`` or ``aga``."""

    calls = 0

    def __init__(self, strategy, dim, n_image_rows, n_text_rows, heads=1):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"aggregator must be one of {STRATEGIES}, got {strategy!r}")
        self.strategy = strategy
        if strategy == "attn":
            self.vis_token = nn.Parameter(torch.zeros(dim))
            self.txt_token = nn.Parameter(torch.zeros(dim))
            self.vis_block = AttentiveBlock(dim, heads)
            self.txt_block = AttentiveBlock(dim, heads)
            trunc_normal_init(self)
            nn.init.trunc_normal_(self.vis_token, std=0.02, a=-0.04, b=0.04)
            nn.init.trunc_normal_(self.txt_token, std=0.02, a=-0.04, b=0.04)
        elif strategy == "aga":
            self.W_v = nn.Parameter(torch.empty(dim, n_image_rows))
            self.W_t = nn.Parameter(torch.empty(dim, n_text_rows))
            nn.init.trunc_normal_(self.W_v, std=0.02, a=-0.04, b=0.04)
            nn.init.trunc_normal_(self.W_t, std=0.02, a=-0.04, b=0.04)

    def forward(self, V_F, T_F, V_cls, T_cls):
        """Returns ``(V_star, T_star, gate_weights)``; gate weights are ``None`` unless AGA."""
        Aggregator.calls += 1
        if self.strategy == "avg":
            return aggregate_average(V_F), aggregate_average(T_F), None
        if self.strategy == "attn":
            return (
                aggregate_attention(V_F, self.vis_token, self.vis_block),
                aggregate_attention(T_F, self.txt_token, self.txt_block),
                None,
            )
        V_star, w_v = aggregate_gated(V_F, V_cls, self.W_v)
        T_star, w_t = aggregate_gated(T_F, T_cls, self.W_t)
        return V_star, T_star, (w_v, w_t)


class GatedFusion(nn.Module):
    """Gated fusion ``W_mm`` plus the linear match head."""

    calls = 0

    def __init__(self, dim, n_rows):
        super().__init__()
        self.W_mm = nn.Parameter(torch.empty(2 * dim, n_rows))
        nn.init.trunc_normal_(self.W_mm, std=0.02, a=-0.04, b=0.04)
        self.head = nn.Linear(dim, 1)
        trunc_normal_init(self.head)

    def forward(self, V_F, T_F, V_cls, T_cls):
        """Match probability and fusion weights for aligned rows of image and text features."""
        GatedFusion.calls += 1
        F_mm, weights = fuse_multimodal(V_F, T_F, V_cls, T_cls, self.W_mm)
        return match_head(F_mm, self.head), weights

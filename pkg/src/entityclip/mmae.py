"""Multimodal attentive experts.

Vision/text self-experts encode their own modality; explanation experts let the
image or query tokens cross-attend into the explanation tokens and return a
bridge vector at the class position.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import TokenSequence
from .layers import AttentiveBlock, TransformerBlock, trunc_normal_init


@dataclass
class ExpertBankConfig:
    K: int = 4
    M: int = 4
    N: int = 4
    D: int = 32
    heads: int = 1
    blocks_per_expert: int = 1
    duplicate_explanation_experts: bool = False

    def __post_init__(self):
        if min(self.K, self.M, self.N) < 1:
            raise ValueError(f"expert counts must be >= 1, got K={self.K} M={self.M} N={self.N}")


@dataclass
class FeatureSet:
    """Expert outputs ``[..., n_pure + n_bridge, D]``; pure-expert rows come first."""

    vectors: torch.Tensor
    n_pure: int

    @property
    def origins(self):
        n = self.vectors.shape[-2]
        return ["pure"] * self.n_pure + ["bridge"] * (n - self.n_pure)

    def __len__(self):
        return self.vectors.shape[-2]


class SelfExpert(nn.Module):
    def __init__(self, dim, n_blocks=1, heads=1):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads) for _ in range(n_blocks))
        trunc_normal_init(self)

    def forward(self, tokens, mask=None):
        x = tokens
        for block in self.blocks:
            x = block(x, mask)
        return x[:, 0]


class ExplanationExpert(AttentiveBlock):
    """Cross-attention expert: ``(X + MLP(LN(Attn(X, E))))_cls``.

    The MLP output layer starts at zero so the expert begins as the residual identity.
    """

    def __init__(self, dim, heads=1):
        super().__init__(dim, heads)
        trunc_normal_init(self)
        self.zero_mlp_output()

    def forward(self, tokens, expl_tokens, expl_mask=None, return_weights=False):
        out, weights = super().forward(tokens, expl_tokens, expl_mask, return_weights=True)
        if return_weights:
            return out[:, 0], weights
        return out[:, 0]


def _check_dim(seq, dim, name):
    if seq.shape[-1] != dim:
        raise ValueError(f"{name} has feature dim {seq.shape[-1]}, expected {dim}")


def self_expert_encode(seq, expert):
    """Class-token output of one self-expert on a single TokenSequence."""
    dim = expert.blocks[0].norm1.normalized_shape[0]
    _check_dim(seq.tokens, dim, "sequence")
    return expert(seq.tokens.unsqueeze(0))[0]


def cross_attention(query_seq, context_seq, expert, return_weights=False):
    """Single-sample cross-attention ``[Lq, D] x [Lc, D] -> [Lq, D]`` using the expert's W_q/W_k/W_v."""
    q = torch.as_tensor(query_seq)
    c = torch.as_tensor(context_seq)
    if c.dim() != 2 or c.shape[0] < 1:
        raise ValueError("context must be a non-empty [Lc, D] matrix")
    _check_dim(q, expert.attn.dim, "query")
    _check_dim(c, expert.attn.dim, "context")
    out, weights = expert.attn(q.unsqueeze(0), c.unsqueeze(0), return_weights=True)
    if return_weights:
        return out[0], weights[0]
    return out[0]


def explanation_expert_forward(seq, expl_seq, expert):
    _check_dim(expl_seq.tokens, expert.attn.dim, "explanation")
    _check_dim(seq.tokens, expert.attn.dim, "sequence")
    return expert(seq.tokens.unsqueeze(0), expl_seq.tokens.unsqueeze(0))[0]


def top_attended_context_tokens(query_seq, context_seq, expert, position, k=5):
    """The ``k`` context indices most attended from ``position``, as ``(index, weight)`` pairs.

    Weights are averaged over heads. Sorted by descending weight, ties to the lower index.
    """
    q = query_seq.tokens if isinstance(query_seq, TokenSequence) else torch.as_tensor(query_seq)
    c = context_seq.tokens if isinstance(context_seq, TokenSequence) else torch.as_tensor(context_seq)
    if not 0 <= position < q.shape[0]:
        raise IndexError(f"position {position} outside [0, {q.shape[0]})")
    if k < 1:
        raise ValueError("k must be >= 1")
    with torch.no_grad():
        _, weights = cross_attention(q, c, expert, return_weights=True)
    row = weights.mean(dim=0)[position].tolist()
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return [(j, row[j]) for j in order[:k]]


class MMAE(nn.Module):
    """Expert banks producing the comprehensive feature sets for image and query text."""

    calls = 0  # instrumented forward count, shared across instances

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.vision_experts = nn.ModuleList(
            SelfExpert(cfg.D, cfg.blocks_per_expert, cfg.heads) for _ in range(cfg.K)
        )
        self.text_experts = nn.ModuleList(
            SelfExpert(cfg.D, cfg.blocks_per_expert, cfg.heads) for _ in range(cfg.M)
        )
        self.explanation_experts = nn.ModuleList(ExplanationExpert(cfg.D, cfg.heads) for _ in range(cfg.N))
        if cfg.duplicate_explanation_experts:
            self.text_explanation_experts = nn.ModuleList(
                ExplanationExpert(cfg.D, cfg.heads) for _ in range(cfg.N)
            )
        else:
            self.text_explanation_experts = self.explanation_experts

    def forward(self, V, T, E, t_mask=None, e_mask=None):
        """Batched ``V [B, P+1, D]``, ``T [B, Lt, D]``, ``E [B, Le, D]`` -> ``(V_F, T_F)``."""
        MMAE.calls += 1
        for name, x in (("V", V), ("T", T), ("E", E)):
            _check_dim(x, self.cfg.D, name)
        v_rows = [expert(V) for expert in self.vision_experts]
        v_rows += [expert(V, E, e_mask) for expert in self.explanation_experts]
        t_rows = [expert(T, t_mask) for expert in self.text_experts]
        t_rows += [expert(T, E, e_mask) for expert in self.text_explanation_experts]
        V_F = FeatureSet(torch.stack(v_rows, dim=1), self.cfg.K)
        T_F = FeatureSet(torch.stack(t_rows, dim=1), self.cfg.M)
        return V_F, T_F

    def bridge_attention(self, tokens, expl_tokens, expl_mask=None, text_path=False):
        """Per-expert cross-attention maps ``[N, B, heads, Lq, Le]`` for visualisation."""
        experts = self.text_explanation_experts if text_path else self.explanation_experts
        with torch.no_grad():
            maps = [expert(tokens, expl_tokens, expl_mask, return_weights=True)[1] for expert in experts]
        return torch.stack(maps)


def mmae_forward(V, T, E, mmae):
    """Single-sample wrapper over ``MMAE.forward`` returning ``[K+N, D]`` / ``[M+N, D]`` feature sets."""
    V_F, T_F = mmae(V.tokens.unsqueeze(0), T.tokens.unsqueeze(0), E.tokens.unsqueeze(0))
    return FeatureSet(V_F.vectors[0], V_F.n_pure), FeatureSet(T_F.vectors[0], T_F.n_pure)

"""Contrastive and matching objectives plus ALBEF-style negative sampling."""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

GI_ITM_EPS = 1e-7


class DegenerateEmbeddingError(ValueError):
    """An embedding row has zero norm, so cosine similarity is undefined."""


@dataclass
class LossWeights:
    eta: float = 0.1
    lam: float = 0.1
    temperature: float = 0.07

    def __post_init__(self):
        if self.eta < 0 or self.lam < 0:
            raise ValueError("eta and lambda must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _unit_rows(X, name):
    norms = X.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateEmbeddingError(f"{name} contains a zero-norm row")
    return X / norms


def cosine_similarity_matrix(A, C):
    """``[B_a, D] x [B_c, D]`` -> cosine similarities ``[B_a, B_c]`` clamped to [-1, 1]."""
    A = torch.as_tensor(A)
    C = torch.as_tensor(C)
    if A.shape[-1] != C.shape[-1]:
        raise ValueError(f"feature dims differ: {A.shape[-1]} vs {C.shape[-1]}")
    return (_unit_rows(A, "A") @ _unit_rows(C, "C").T).clamp(-1.0, 1.0)


def contrastive_loss(V, T, temperature=1.0):
    """Symmetric InfoNCE over cosine similarities of aligned rows, averaged over the batch."""
    logits = cosine_similarity_matrix(V, T) / temperature
    targets = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def _as_generator(seed):
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def sample_negatives(sim, seed):
    """Draw one negative text per image (rows) and one negative image per text (columns).

    Candidates are weighted by softmax of the raw similarities with the positive
    masked out. ``seed`` may be an int or a ``torch.Generator`` (advanced in place).
    """
    sim = torch.as_tensor(sim).detach()
    B = sim.shape[0]
    if sim.dim() != 2 or sim.shape[1] != B:
        raise ValueError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    if B < 2:
        raise ValueError("negative sampling needs a batch of at least 2")
    if not torch.isfinite(sim).all():
        raise FloatingPointError("similarity matrix contains non-finite values")
    g = _as_generator(seed)
    diag = torch.eye(B, dtype=torch.bool)
    w_t = torch.softmax(sim.masked_fill(diag, float("-inf")), dim=1)
    w_v = torch.softmax(sim.T.masked_fill(diag, float("-inf")), dim=1)
    neg_text = torch.multinomial(w_t, 1, generator=g).squeeze(1)
    neg_image = torch.multinomial(w_v, 1, generator=g).squeeze(1)
    return neg_text.tolist(), neg_image.tolist()


def match_head(F_mm, head):
    """Match probability ``sigmoid(head(F_mm))``."""
    return torch.sigmoid(head(F_mm)).squeeze(-1)


def gi_itm_loss(p_pos, p_neg_t, p_neg_v, literal_eq15=False):
    """Three-way matching loss, batch mean.

    Default is binary cross-entropy. ``literal_eq15=True`` evaluates the
    alternative form ``(1/3)(-log p_pos + (1 - log p_neg_t) + (1 - log p_neg_v))``,
    which pushes negative-pair probabilities up rather than down and is kept
    only for comparison.
    """
    eps = GI_ITM_EPS
    p_pos, p_neg_t, p_neg_v = (torch.as_tensor(p).clamp(eps, 1 - eps) for p in (p_pos, p_neg_t, p_neg_v))
    if literal_eq15:
        per = -torch.log(p_pos) + (1 - torch.log(p_neg_t)) + (1 - torch.log(p_neg_v))
    else:
        per = -torch.log(p_pos) - torch.log1p(-p_neg_t) - torch.log1p(-p_neg_v)
    return (per / 3).mean()


def total_loss(V_cls, T_cls, V_star, T_star, gi_itm_terms, weights, temperature=None, literal_eq15=False):
    """Encoder contrastive + eta * matching + lambda * aggregated contrastive.

    ``gi_itm_terms`` is ``(p_pos, p_neg_t, p_neg_v)`` or ``None`` (term taken as 0).
    Returns ``(total, breakdown)``.
    """
    tau = weights.temperature if temperature is None else temperature
    l_cls = contrastive_loss(V_cls, T_cls, tau)
    if V_star is None:
        l_star = torch.zeros_like(l_cls)
    else:
        l_star = contrastive_loss(V_star, T_star, tau)
    if gi_itm_terms is None:
        l_gfm = torch.zeros_like(l_cls)
    else:
        l_gfm = gi_itm_loss(*gi_itm_terms, literal_eq15=literal_eq15)
    total = l_cls + weights.eta * l_gfm + weights.lam * l_star
    return total, {"l_vtc_cls": l_cls, "l_gfm": l_gfm, "l_vtc_star": l_star, "total": total}

"""The trainable bundle: encoders, attentive experts, aggregation and gated matching."""

import math

import torch
import torch.nn as nn

from .aggregation import Aggregator, GatedFusion
from .encoders import EncoderConfig, TextEncoder, build_image_encoder, pad_ids
from .mmae import MMAE, ExpertBankConfig
from .objectives import LossWeights, cosine_similarity_matrix, sample_negatives, total_loss

MIN_LOGIT_SCALE, MAX_LOGIT_SCALE = 0.01, 100.0


class EntityCLIP(nn.Module):
    """Dual encoder trained with expert-derived auxiliary objectives.

    Retrieval uses :meth:`encode_images` / :meth:`encode_texts` only; the
    experts, aggregators and match head exist for training.
    """

    def __init__(self, run_cfg, enc_cfg):
        super().__init__()
        self.run_cfg = run_cfg
        self.enc_cfg = enc_cfg
        D = enc_cfg.model_dim
        self.image_encoder = build_image_encoder(enc_cfg)
        self.text_encoder = TextEncoder(enc_cfg)
        bank = ExpertBankConfig(
            K=run_cfg.K, M=run_cfg.M, N=run_cfg.N, D=D, heads=run_cfg.heads,
            blocks_per_expert=run_cfg.blocks_per_expert,
            duplicate_explanation_experts=run_cfg.duplicate_explanation_experts,
        )
        self.mmae = MMAE(bank)
        self.aggregator = Aggregator(run_cfg.aggregator, D, bank.K + bank.N, bank.M + bank.N, run_cfg.heads)
        self.fusion = GatedFusion(D, bank.K + bank.M + 2 * bank.N)
        init_scale = math.log(1.0 / run_cfg.temperature)
        if run_cfg.learn_temperature:
            self.logit_scale = nn.Parameter(torch.tensor(init_scale))
        else:
            self.register_buffer("logit_scale", torch.tensor(init_scale))
        if run_cfg.freeze_encoders:
            for p in list(self.image_encoder.parameters()) + list(self.text_encoder.parameters()):
                p.requires_grad_(False)

    @property
    def query_encoder(self):
        return self.text_encoder

    @property
    def explanation_encoder(self):
        return self.text_encoder

    def temperature(self):
        return 1.0 / self.logit_scale.exp().clamp(MIN_LOGIT_SCALE, MAX_LOGIT_SCALE)

    def loss_weights(self):
        return LossWeights(self.run_cfg.eta, self.run_cfg.lam, self.run_cfg.temperature)

    def encode_images(self, images):
        return self.image_encoder(images)[:, 0]

    def encode_texts(self, ids):
        ids_t, mask = pad_ids(ids)
        return self.text_encoder(ids_t, mask)[:, 0]

    def expert_features(self, images, query_ids, expl_ids):
        """Encoder outputs and expert feature sets for a batch."""
        V = self.image_encoder(images)
        q_ids, q_mask = pad_ids(query_ids)
        e_ids, e_mask = pad_ids(expl_ids)
        T = self.text_encoder(q_ids, q_mask)
        E = self.text_encoder(e_ids, e_mask)
        V_F, T_F = self.mmae(V, T, E, q_mask, e_mask)
        return {"V": V, "T": T, "E": E, "t_mask": q_mask, "e_mask": e_mask, "V_F": V_F, "T_F": T_F}

    def losses(self, images, query_ids, expl_ids, sampler, negatives=None):
        """Full objective on one batch.

        ``sampler`` is a seed or ``torch.Generator`` for negative sampling;
        ``negatives`` (``(neg_text, neg_image)`` index lists) overrides sampling.
        Returns ``(total, breakdown)``.
        """
        feats = self.expert_features(images, query_ids, expl_ids)
        V_cls, T_cls = feats["V"][:, 0], feats["T"][:, 0]
        V_F, T_F = feats["V_F"].vectors, feats["T_F"].vectors
        V_star, T_star, _ = self.aggregator(V_F, T_F, V_cls, T_cls)
        if negatives is None:
            with torch.no_grad():
                sim = cosine_similarity_matrix(V_cls, T_cls)
            negatives = sample_negatives(sim, sampler)
        neg_t, neg_v = (torch.as_tensor(n, dtype=torch.long) for n in negatives)
        p_pos, _ = self.fusion(V_F, T_F, V_cls, T_cls)
        p_neg_t, _ = self.fusion(V_F, T_F[neg_t], V_cls, T_cls[neg_t])
        p_neg_v, _ = self.fusion(V_F[neg_v], T_F, V_cls[neg_v], T_cls)
        return total_loss(
            V_cls, T_cls, V_star, T_star, (p_pos, p_neg_t, p_neg_v),
            self.loss_weights(), temperature=self.temperature(),
            literal_eq15=self.run_cfg.literal_eq15,
        )

    def base_losses(self, images, query_ids):
        """Encoder-only contrastive objective (the eta = lambda = 0 reduction, without expert compute)."""
        V_cls = self.encode_images(images)
        T_cls = self.encode_texts(query_ids)
        return total_loss(V_cls, T_cls, None, None, None, self.loss_weights(), temperature=self.temperature())


def encoder_config_for(run_cfg, vocab_size, image_shape):
    """Encoder hyper-parameters from the run config, inferring image geometry from a sample."""
    H, W, C = image_shape
    if H != W:
        raise ValueError(f"only square images are supported, got {H}x{W}")
    size = run_cfg.image_size or H
    patch = run_cfg.patch_size or (32 if size % 32 == 0 else 1)
    return EncoderConfig(
        model_dim=run_cfg.model_dim,
        depth=run_cfg.encoder_depth,
        heads=run_cfg.heads,
        vocab_size=vocab_size,
        max_text_tokens=run_cfg.max_text_tokens,
        image_size=size,
        patch_size=patch,
        channels=run_cfg.channels or C,
        image_backbone=run_cfg.image_backbone,
    )

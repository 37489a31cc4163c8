"""Attention and gate dumps for trained checkpoints."""

import torch

from .encoders import pad_ids
from .training import stack_images, tokenize_records


def _token_label(tokenizer, token_id):
    return tokenizer.decode_id(int(token_id))


def attention_dump(model, tokenizer, record, expert=0, top_k=5):
    """Top explanation tokens attended by the image and query cls rows of one explanation expert."""
    n = len(model.mmae.explanation_experts)
    if not 0 <= expert < n:
        raise IndexError(f"expert must be in [0, {n}), got {expert}")
    L = model.enc_cfg.max_text_tokens
    q_ids = tokenize_records([record], tokenizer, L)
    e_ids = tokenize_records([record], tokenizer, L, "explanation_text")
    with torch.no_grad():
        V = model.image_encoder(stack_images([record], model.enc_cfg))
        T = model.text_encoder(*pad_ids(q_ids))
        E = model.text_encoder(*pad_ids(e_ids))
        maps = {
            "image": model.mmae.bridge_attention(V, E)[expert],
            "query": model.mmae.bridge_attention(T, E, text_path=True)[expert],
        }
    expl = e_ids[0]
    out = {"id": record.id, "expert": expert, "explanation_tokens": [_token_label(tokenizer, t) for t in expl]}
    for name, w in maps.items():
        row = w[0, :, 0].mean(dim=0)  # cls query row, averaged over heads
        order = sorted(range(len(row)), key=lambda j: (-float(row[j]), j))[:top_k]
        out[name] = {
            "cls_weights": [float(x) for x in row],
            "top": [{"position": j, "token": _token_label(tokenizer, expl[j]), "weight": float(row[j])} for j in order],
        }
    return out


def _labels(prefix, origins):
    seen = {}
    out = []
    for o in origins:
        out.append(f"{prefix}:{o}{seen.get(o, 0)}")
        seen[o] = seen.get(o, 0) + 1
    return out


def expert_weights(model, tokenizer, records):
    """Per-sample and mean aggregation gates and fusion weights, labelled by feature origin."""
    L = model.enc_cfg.max_text_tokens
    with torch.no_grad():
        feats = model.expert_features(
            stack_images(records, model.enc_cfg),
            tokenize_records(records, tokenizer, L),
            tokenize_records(records, tokenizer, L, "explanation_text"),
        )
        V_cls, T_cls = feats["V"][:, 0], feats["T"][:, 0]
        V_F, T_F = feats["V_F"], feats["T_F"]
        _, _, gates = model.aggregator(V_F.vectors, T_F.vectors, V_cls, T_cls)
        _, fusion = model.fusion(V_F.vectors, T_F.vectors, V_cls, T_cls)
    v_labels = _labels("image", V_F.origins)
    t_labels = _labels("text", T_F.origins)

    def named(w_v, w_t, w_mm):
        out = {"fusion_weights": dict(zip(v_labels + t_labels, w_mm.tolist()))}
        if w_v is not None:
            out["image_gates"] = dict(zip(v_labels, w_v.tolist()))
            out["text_gates"] = dict(zip(t_labels, w_t.tolist()))
        return out

    g_v, g_t = gates if gates is not None else (None, None)
    samples = []
    for i, rec in enumerate(records):
        row = named(None if g_v is None else g_v[i], None if g_t is None else g_t[i], fusion[i])
        samples.append({"id": rec.id, **row})
    mean = named(None if g_v is None else g_v.mean(dim=0), None if g_t is None else g_t.mean(dim=0),
                 fusion.mean(dim=0))
    return {"aggregator": model.aggregator.strategy, "n_records": len(records), "mean": mean, "samples": samples}

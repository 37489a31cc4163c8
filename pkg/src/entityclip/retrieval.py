"""Encoder-only similarity scoring, ranking metrics and zero-shot classification."""

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .objectives import cosine_similarity_matrix

RECALL_KS = (1, 5, 10, 50, 100)
IMAGE_PROMPT = "A News image of {}"
HEADLINE_PROMPT = "A News of {}"


def inference_similarity(images, texts, model):
    """Cosine similarity ``[n_images, n_texts]`` of encoder class tokens.

    ``images`` is a float tensor accepted by the image encoder, ``texts`` a list
    of id lists. Only the two encoders run.
    """
    with torch.no_grad():
        return cosine_similarity_matrix(model.encode_images(images), model.encode_texts(texts))


def ranks_of_truth(sim, truth):
    """1-based rank of the true gallery item per query; ties count in the query's favour."""
    sim = np.asarray(sim, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if sim.ndim != 2 or truth.shape != (sim.shape[0],):
        raise ValueError("need a [Q, G] similarity matrix and Q truth indices")
    if truth.size and (truth.min() < 0 or truth.max() >= sim.shape[1]):
        raise IndexError(f"truth index outside gallery of size {sim.shape[1]}")
    true_scores = sim[np.arange(sim.shape[0]), truth]
    return (1 + (sim > true_scores[:, None]).sum(axis=1)).tolist()


def recall_at_k(ranks, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks)
    return 100.0 * float((ranks <= k).sum()) / len(ranks)


@dataclass
class DirectionMetrics:
    r1: float
    r5: float
    r10: float
    r50: float
    r100: float
    avg: float
    mr: float


def _direction(ranks):
    if len(ranks) == 0:
        raise ValueError("no ranks to report")
    r = [recall_at_k(ranks, k) for k in RECALL_KS]
    return DirectionMetrics(*r, avg=sum(r) / 5, mr=float(np.mean(ranks)))


@dataclass
class RetrievalReport:
    t2i: DirectionMetrics
    i2t: DirectionMetrics

    def to_dict(self):
        return {"t2i": asdict(self.t2i), "i2t": asdict(self.i2t)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_table(self):
        """Aligned text table: image retrieval R@1/5/10, AVG, MR then text retrieval likewise."""
        header = ["IR R@1", "IR R@5", "IR R@10", "AVG t2i", "MR t2i",
                  "TR R@1", "TR R@5", "TR R@10", "AVG i2t", "MR i2t"]
        values = []
        for d in (self.t2i, self.i2t):
            values += [d.r1, d.r5, d.r10, d.avg, d.mr]
        width = max(len(h) for h in header) + 2
        top = "".join(h.rjust(width) for h in header)
        row = "".join(f"{v:.2f}".rjust(width) for v in values)
        return f"{top}\n{row}"


def report(ranks_t2i, ranks_i2t):
    return RetrievalReport(_direction(ranks_t2i), _direction(ranks_i2t))


def retrieval_report(sim):
    """Report for a square image-by-text similarity matrix whose diagonal holds the true pairs."""
    sim = np.asarray(sim)
    truth = np.arange(sim.shape[0])
    return report(ranks_of_truth(sim.T, truth), ranks_of_truth(sim, truth))


def zero_shot_scores(image_feat, headline_feat, prompt_feats_v, prompt_feats_h, w):
    """Blended association scores ``w * cos(V, P_v) + (1 - w) * cos(H, P_h)`` per category."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    pv = torch.as_tensor(prompt_feats_v)
    ph = torch.as_tensor(prompt_feats_h)
    if pv.shape[0] == 0:
        raise ValueError("no categories to classify into")
    if pv.shape[0] != ph.shape[0]:
        raise ValueError("image and headline prompt sets must have equal category counts")
    sv = cosine_similarity_matrix(torch.as_tensor(image_feat).reshape(1, -1), pv)[0]
    sh = cosine_similarity_matrix(torch.as_tensor(headline_feat).reshape(1, -1), ph)[0]
    return w * sv + (1 - w) * sh


def zero_shot_classify(image_feat, headline_feat, prompt_feats_v, prompt_feats_h, w):
    """Index of the highest-scoring category; ties go to the lowest index."""
    scores = zero_shot_scores(image_feat, headline_feat, prompt_feats_v, prompt_feats_h, w)
    return int(np.argmax(scores.detach().cpu().numpy()))


def confusion_matrix(predictions, labels, category_count):
    """Counts indexed ``[true, predicted]``."""
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    out = np.zeros((category_count, category_count), dtype=np.int64)
    for p, t in zip(predictions, labels):
        if not (0 <= p < category_count and 0 <= t < category_count):
            raise IndexError(f"label {t} or prediction {p} outside [0, {category_count})")
        out[t, p] += 1
    return out

"""scikit-learn style wrapper around training and encoder-only retrieval."""

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_records, check_texts
from .config import RunConfig
from .training import evaluate, similarity_for, stack_images, train


class EntityCLIPRetriever(BaseEstimator):
    """Dual-encoder retriever trained with the explanation-bridged objective.

    Constructor parameters mirror :class:`~entityclip.config.RunConfig` one to
    one, so ``get_params`` / ``set_params`` / ``clone`` work as usual.

    Examples
    --------
    >>> from entityclip.data import make_synthetic_dataset
    >>> train_set, test_set = make_synthetic_dataset(16, 8, seed=0)
    >>> est = EntityCLIPRetriever(steps=5, K=1, M=1, N=1).fit(train_set)
    >>> est.transform_texts(["c0v1 c1v2"]).shape
    (1, 64)
    """

    def __init__(self, K=4, M=4, N=4, aggregator="aga", eta=0.1, lam=0.1, temperature=0.07,
                 learn_temperature=True, literal_eq15=False, duplicate_explanation_experts=False,
                 blocks_per_expert=1, batch_size=32, lr=1e-4, steps=2000, seed=0, freeze_encoders=False,
                 model_dim=64, encoder_depth=2, heads=1, max_text_tokens=77, max_words=4096,
                 image_size=None, patch_size=None, channels=None, image_backbone="vit",
                 explanation_source="stub", explanation_cache=None):
        self.K = K
        self.M = M
        self.N = N
        self.aggregator = aggregator
        self.eta = eta
        self.lam = lam
        self.temperature = temperature
        self.learn_temperature = learn_temperature
        self.literal_eq15 = literal_eq15
        self.duplicate_explanation_experts = duplicate_explanation_experts
        self.blocks_per_expert = blocks_per_expert
        self.batch_size = batch_size
        self.lr = lr
        self.steps = steps
        self.seed = seed
        self.freeze_encoders = freeze_encoders
        self.model_dim = model_dim
        self.encoder_depth = encoder_depth
        self.heads = heads
        self.max_text_tokens = max_text_tokens
        self.max_words = max_words
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.image_backbone = image_backbone
        self.explanation_source = explanation_source
        self.explanation_cache = explanation_cache

    def run_config(self):
        return RunConfig(**self.get_params())

    def fit(self, X, y=None, log_path=None):
        """Train on a sequence of :class:`DatasetRecord` (``y`` is ignored)."""
        records = check_records(X, min_count=2, name="X")
        self.checkpoint_, self.log_ = train(self.run_config(), records, log_path=log_path)
        self.model_, self.tokenizer_ = self.checkpoint_.build()
        self.n_features_out_ = self.model_.enc_cfg.model_dim
        return self

    def transform_images(self, X):
        check_is_fitted(self, "model_")
        records = check_records(X, name="X")
        with torch.no_grad():
            return self.model_.encode_images(stack_images(records, self.model_.enc_cfg)).numpy()

    def transform_texts(self, texts):
        check_is_fitted(self, "model_")
        texts = check_texts(texts)
        ids = [self.tokenizer_.encode(t, self.model_.enc_cfg.max_text_tokens) for t in texts]
        with torch.no_grad():
            return self.model_.encode_texts(ids).numpy()

    def transform(self, X):
        """Query-text embeddings ``[n, model_dim]`` for records."""
        records = check_records(X, name="X")
        return self.transform_texts([r.query_text for r in records])

    def similarity(self, X):
        """Cosine image-by-text similarity matrix over paired records."""
        check_is_fitted(self, "model_")
        records = check_records(X, name="X")
        return similarity_for(self.model_, self.tokenizer_, records).numpy()

    def evaluate(self, X):
        check_is_fitted(self, "checkpoint_")
        return evaluate(self.checkpoint_, check_records(X, name="X"))

    def score(self, X, y=None):
        """Mean of the text-to-image and image-to-text AVG recall on paired records (0 to 100)."""
        rep = self.evaluate(X)
        return (rep.t2i.avg + rep.i2t.avg) / 2

    def retrieve(self, query, gallery, k=5):
        """Top-``k`` ``(record id, cosine)`` pairs for a text query; ties keep gallery order."""
        k = check_positive_int(k, "k")
        gallery = check_records(gallery, name="gallery")
        img = self.transform_images(gallery)
        txt = self.transform_texts([query])[0]
        scores = img @ txt / (np.linalg.norm(img, axis=1) * np.linalg.norm(txt))
        order = np.argsort(-scores, kind="stable")[:k]
        return [(gallery[i].id, float(scores[i])) for i in order]

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = False
        tags.requires_fit = True
        return tags

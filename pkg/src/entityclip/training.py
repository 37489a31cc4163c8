"""Training loop, checkpoints and encoder-only evaluation."""

import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .encoders import EncoderConfig, Tokenizer, load_image
from .model import EntityCLIP, encoder_config_for
from .retrieval import inference_similarity, retrieval_report

logger = logging.getLogger(__name__)

LOG_KEYS = ("step", "l_vtc_cls", "l_gfm", "l_vtc_star", "total")


class TrainingDivergedError(RuntimeError):
    pass


def seed_streams(seed):
    """Independent integer seeds for parameter init, negative sampling and shuffling."""
    children = np.random.SeedSequence(seed).spawn(3)
    return {name: int(c.generate_state(1)[0]) for name, c in zip(("init", "sampling", "shuffling"), children)}


def _image_array(record, enc_cfg=None):
    if isinstance(record.image, str):
        if enc_cfg is None:
            if record.image.endswith(".npy"):
                return np.load(record.image)
            raise ValueError("image geometry for file inputs needs image_size/channels in the config")
        return load_image(record.image, enc_cfg)
    return record.image


def stack_images(records, enc_cfg):
    return torch.from_numpy(np.stack([_image_array(r, enc_cfg) for r in records]).astype(np.float32))


def tokenize_records(records, tokenizer, max_len, field="query_text"):
    return [tokenizer.encode(getattr(r, field) or "", max_len) for r in records]


@dataclass
class Checkpoint:
    state_dict: dict
    run_config: dict
    encoder_config: dict
    vocabulary: list
    step: int
    optimizer_state: dict

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path):
        return cls(**torch.load(path, map_location="cpu", weights_only=False))

    def build(self):
        """Reconstruct ``(model, tokenizer)`` from the stored parameters."""
        run_cfg = RunConfig(**self.run_config)
        enc_cfg = EncoderConfig(**self.encoder_config)
        model = EntityCLIP(run_cfg, enc_cfg)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model, Tokenizer(self.vocabulary)


def build_model(cfg, records):
    """Fit the tokenizer on the training texts and initialise the model from the init seed stream."""
    texts = [r.query_text for r in records] + [r.explanation_text or "" for r in records]
    tokenizer = Tokenizer.fit(texts, cfg.max_words)
    sample = _image_array(records[0])
    if cfg.image_size is not None and cfg.channels is not None:
        shape = (cfg.image_size, cfg.image_size, cfg.channels)
    else:
        shape = np.asarray(sample).shape
    enc_cfg = encoder_config_for(cfg, tokenizer.vocab_size, shape)
    torch.manual_seed(seed_streams(cfg.seed)["init"])
    return EntityCLIP(cfg, enc_cfg), tokenizer


def _through_serializer(obj):
    # pickling memoises shared strings (e.g. optimizer state keys); passing the
    # snapshot through one save/load makes the first save match later round trips
    buf = io.BytesIO()
    torch.save(obj, buf)
    buf.seek(0)
    return torch.load(buf, map_location="cpu", weights_only=False)


def _snapshot(model, tokenizer, cfg, step, optimizer):
    return Checkpoint(
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        run_config=cfg.to_dict(),
        encoder_config=dict(model.enc_cfg.__dict__),
        vocabulary=list(tokenizer.words),
        step=step,
        optimizer_state=_through_serializer(optimizer.state_dict()) if optimizer is not None else {},
    )


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) >= 2:
                yield idx


def _log_row(step, breakdown):
    row = {"step": step}
    row.update({k: float(breakdown[k].detach()) for k in LOG_KEYS[1:]})
    return row


def train(cfg, records, log_path=None, checkpoint_path=None, checkpoint_every=0):
    """Optimise the full objective with Adam for ``cfg.steps`` steps.

    Returns ``(checkpoint, log)`` where ``log`` is the list of per-step loss
    rows (also streamed as JSON lines to ``log_path``). Raises
    :class:`TrainingDivergedError` on a non-finite loss.
    """
    if len(records) < 2:
        raise ValueError("training needs at least two records")
    model, tokenizer = build_model(cfg, records)
    streams = seed_streams(cfg.seed)
    enc_cfg = model.enc_cfg
    images = stack_images(records, enc_cfg)
    q_ids = tokenize_records(records, tokenizer, enc_cfg.max_text_tokens)
    e_ids = tokenize_records(records, tokenizer, enc_cfg.max_text_tokens, "explanation_text")

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    sampler = torch.Generator().manual_seed(streams["sampling"])
    batches = _batches(len(records), min(cfg.batch_size, len(records)), np.random.default_rng(streams["shuffling"]))
    use_experts = cfg.eta > 0 or cfg.lam > 0

    log = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    model.train()
    try:
        for step in range(cfg.steps):
            idx = next(batches)
            bi, bq, be = images[idx], [q_ids[i] for i in idx], [e_ids[i] for i in idx]
            try:
                if use_experts:
                    total, breakdown = model.losses(bi, bq, be, sampler)
                else:
                    total, breakdown = model.base_losses(bi, bq)
                row = _log_row(step, breakdown)
            except FloatingPointError:
                row = {"step": step, **{k: float("nan") for k in LOG_KEYS[1:]}}
            if not all(math.isfinite(row[k]) for k in LOG_KEYS[1:]):
                last = log[-1] if log else None
                dump = {"diverged_at": step, "row": row, "last_finite": last}
                if log_path:
                    Path(str(log_path) + ".diverged.json").write_text(json.dumps(dump))
                raise TrainingDivergedError(f"non-finite loss at step {step}; last finite row: {last}")
            log.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
                _snapshot(model, tokenizer, cfg, step + 1, optimizer).save(checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()

    model.eval()
    ckpt = _snapshot(model, tokenizer, cfg, cfg.steps, optimizer)
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return ckpt, log


def objective_on(checkpoint, records, seed=0):
    """Full-objective breakdown on ``records`` as one batch, with a fixed sampling seed."""
    model, tokenizer = checkpoint.build()
    L = model.enc_cfg.max_text_tokens
    with torch.no_grad():
        _, breakdown = model.losses(
            stack_images(records, model.enc_cfg),
            tokenize_records(records, tokenizer, L),
            tokenize_records(records, tokenizer, L, "explanation_text"),
            seed,
        )
    return {k: float(v) for k, v in breakdown.items()}


def similarity_for(model, tokenizer, records):
    images = stack_images(records, model.enc_cfg)
    texts = tokenize_records(records, tokenizer, model.enc_cfg.max_text_tokens)
    return inference_similarity(images, texts, model)


def evaluate(checkpoint, records):
    """Retrieval report over ``records`` (pair ``i`` = image ``i`` + query ``i``), encoders only."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Checkpoint.load(checkpoint)
    model, tokenizer = checkpoint.build()
    return retrieval_report(similarity_for(model, tokenizer, records).numpy())

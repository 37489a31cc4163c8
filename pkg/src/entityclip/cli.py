"""Command-line entry point: ``entityclip <subcommand> ...``."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import introspect
from .config import RunConfig, load_config
from .data import load_dataset, make_synthetic_dataset, save_dataset
from .explanation import ExplanationCache, HttpClient, StubClient, generate_explanation
from .retrieval import HEADLINE_PROMPT, IMAGE_PROMPT, confusion_matrix, zero_shot_classify
from .training import Checkpoint, evaluate, stack_images, train

logger = logging.getLogger("entityclip")


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_generate_explanations(args):
    if args.client == "stub":
        client = StubClient()
    else:
        if not args.url:
            raise SystemExit("--url is required for the http client")
        client = HttpClient(args.url, model=args.model)
    cache = ExplanationCache(args.cache)
    records = load_dataset(args.dataset, fallback=lambda q: "-")
    before = len(cache)
    for rec in records:
        rec.explanation_text = generate_explanation(rec.query_text, client, cache).explanation
    logger.info("cache %s: %d new, %d total", cache.path, len(cache) - before, len(cache))
    if args.out:
        save_dataset(records, args.out)


def cmd_make_synthetic(args):
    train_recs, test_recs = make_synthetic_dataset(args.n_pairs, args.d_latent, args.noise, args.seed, args.n_test)
    out = Path(args.out_dir)
    save_dataset(train_recs, out / "train.jsonl")
    save_dataset(test_recs, out / "test.jsonl")
    print(f"wrote {len(train_recs)} train / {len(test_recs)} test pairs to {out}")


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    records = load_dataset(args.dataset, cache=cfg.explanation_cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = train(cfg, records, log_path=out / "train_log.jsonl", checkpoint_path=out / "checkpoint.pt",
                      checkpoint_every=args.checkpoint_every)
    if log:
        logger.info("step 0 loss %.4f -> step %d loss %.4f", log[0]["total"], log[-1]["step"], log[-1]["total"])
    print(out / "checkpoint.pt")


def cmd_evaluate(args):
    rep = evaluate(Checkpoint.load(args.checkpoint), load_dataset(args.dataset))
    print(rep.to_table())
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n", encoding="utf-8")
    else:
        print(rep.to_json())


def cmd_retrieve(args):
    model, tokenizer = Checkpoint.load(args.checkpoint).build()
    records = load_dataset(args.dataset)
    with torch.no_grad():
        img = model.encode_images(stack_images(records, model.enc_cfg))
        txt = model.encode_texts([tokenizer.encode(args.query, model.enc_cfg.max_text_tokens)])
        scores = torch.nn.functional.cosine_similarity(img, txt)
    order = torch.argsort(scores, descending=True, stable=True)[: args.top_k]
    _write_json([{"id": records[i].id, "score": float(scores[i])} for i in order.tolist()], None)


def cmd_classify_zeroshot(args):
    model, tokenizer = Checkpoint.load(args.checkpoint).build()
    records = load_dataset(args.dataset)
    categories = [c.strip() for c in args.categories.split(",") if c.strip()]
    index = {c: i for i, c in enumerate(categories)}
    L = model.enc_cfg.max_text_tokens
    with torch.no_grad():
        pv = model.encode_texts([tokenizer.encode(IMAGE_PROMPT.format(c), L) for c in categories])
        ph = model.encode_texts([tokenizer.encode(HEADLINE_PROMPT.format(c), L) for c in categories])
        img = model.encode_images(stack_images(records, model.enc_cfg))
        head = model.encode_texts([tokenizer.encode(r.query_text, L) for r in records])
    preds = [zero_shot_classify(img[i], head[i], pv, ph, args.w) for i in range(len(records))]
    labelled = [(p, index[r.label]) for p, r in zip(preds, records) if r.label in index]
    if not labelled:
        raise SystemExit("no records carry a label from --categories")
    p, t = zip(*labelled)
    cm = confusion_matrix(p, t, len(categories))
    _write_json({
        "w": args.w,
        "categories": categories,
        "accuracy": 100.0 * float(cm.trace()) / len(labelled),
        "confusion_matrix": cm.tolist(),
    }, args.out)


def cmd_inspect_attention(args):
    model, tokenizer = Checkpoint.load(args.checkpoint).build()
    records = load_dataset(args.dataset)
    dump = introspect.attention_dump(model, tokenizer, records[args.index], args.expert, args.top_k)
    _write_json(dump, args.out)


def cmd_inspect_experts(args):
    model, tokenizer = Checkpoint.load(args.checkpoint).build()
    records = load_dataset(args.dataset)
    _write_json(introspect.expert_weights(model, tokenizer, records), args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="entityclip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-explanations", help="fill the explanation cache for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--client", choices=("stub", "http"), default="stub")
    p.add_argument("--cache", required=True)
    p.add_argument("--url")
    p.add_argument("--model", default="mistral-7b")
    p.add_argument("--out", help="also write the dataset with explanation_text filled in")
    p.set_defaults(func=cmd_generate_explanations)

    p = sub.add_parser("make-synthetic", help="write synthetic train/test JSON-lines splits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-pairs", type=int, default=64)
    p.add_argument("--n-test", type=int)
    p.add_argument("--d-latent", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train")
    p.add_argument("--config")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--steps", type=int, help="override the config's step budget")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--json", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("retrieve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="image gallery")
    p.add_argument("--query", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("classify-zeroshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="records with image, query_text (headline) and label")
    p.add_argument("--categories", required=True, help="comma-separated category names")
    p.add_argument("--w", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify_zeroshot)

    p = sub.add_parser("inspect-attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--expert", type=int, default=0)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_attention)

    p = sub.add_parser("inspect-experts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_experts)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

import json

import numpy as np
import pytest
import torch

from entityclip.config import RunConfig, dump_config, load_config
from entityclip.data import DatasetError, DatasetRecord, load_dataset, make_synthetic_dataset, save_dataset
from entityclip.explanation import ExplanationCache, StubClient, generate_explanation, stub_explain
from entityclip.training import Checkpoint, TrainingDivergedError, build_model, evaluate, seed_streams, train

SMALL = dict(K=1, M=1, N=1, model_dim=8, encoder_depth=1, batch_size=8)


def _lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def _row(i, **kw):
    return {"id": f"r{i}", "image": [[[0.0]]], "query_text": f"query {i}", **kw}


def test_load_three_lines(tmp_path):
    recs = load_dataset(_lines(tmp_path / "d.jsonl", [_row(i) for i in range(3)]))
    assert [r.id for r in recs] == ["r0", "r1", "r2"]


def test_load_missing_query_names_line(tmp_path):
    rows = [_row(0), {"id": "r1", "image": [[[0.0]]]}]
    with pytest.raises(DatasetError, match=r":2: missing query_text"):
        load_dataset(_lines(tmp_path / "d.jsonl", rows))


def test_load_malformed_json_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(_row(0)) + "\n{not json\n")
    with pytest.raises(DatasetError, match=r":2: invalid JSON"):
        load_dataset(path)


def test_load_duplicate_id_rejected(tmp_path):
    with pytest.raises(DatasetError, match="duplicate id"):
        load_dataset(_lines(tmp_path / "d.jsonl", [_row(0), _row(0)]))


def test_load_stub_fallback(tmp_path):
    rec = load_dataset(_lines(tmp_path / "d.jsonl", [_row(0)]))[0]
    assert rec.explanation_text == stub_explain("query 0")


def test_load_uses_cache_before_stub(tmp_path):
    cache = ExplanationCache(tmp_path / "cache.jsonl")
    generate_explanation("query 0", StubClient("CACHED"), cache)
    rec = load_dataset(_lines(tmp_path / "d.jsonl", [_row(0)]), cache=cache.path)[0]
    assert rec.explanation_text == "CACHED"


def test_load_keeps_explicit_explanation_and_label(tmp_path):
    rec = load_dataset(_lines(tmp_path / "d.jsonl", [_row(0, explanation_text="E", label="sport")]))[0]
    assert (rec.explanation_text, rec.label) == ("E", "sport")


def test_load_resolves_relative_image_paths(tmp_path):
    rec = load_dataset(_lines(tmp_path / "d.jsonl", [_row(0, image="img/a.png")]))[0]
    assert rec.image == str(tmp_path / "img" / "a.png")


def test_save_load_round_trip(tmp_path):
    train_set, _ = make_synthetic_dataset(8, 4, seed=1)
    save_dataset(train_set, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    for a, b in zip(train_set, back):
        assert (a.id, a.query_text, a.explanation_text) == (b.id, b.query_text, b.explanation_text)
        assert np.array_equal(a.image, b.image)


def test_record_rejects_empty_query():
    with pytest.raises(DatasetError):
        DatasetRecord("x", "a.png", "")


def test_synthetic_deterministic_and_sized():
    a_train, a_test = make_synthetic_dataset(64, 16, noise=0.1, seed=3)
    b_train, b_test = make_synthetic_dataset(64, 16, noise=0.1, seed=3)
    assert (len(a_train), len(a_test)) == (64, 32)
    for x, y in zip(a_train + a_test, b_train + b_test):
        assert x.query_text == y.query_text and x.explanation_text == y.explanation_text
        assert np.array_equal(x.image, y.image)
    assert len({r.id for r in a_train + a_test}) == 96


def test_synthetic_explanation_carries_extra_coordinates():
    train_set, _ = make_synthetic_dataset(8, 16, noise=0.0, seed=0)
    for rec in train_set:
        q = {w[: w.index("v")] for w in rec.query_text.split()}
        e = {w[: w.index("v")] for w in rec.explanation_text.split()}
        assert q < e


def test_synthetic_noise_free_pairs_distinct():
    train_set, test_set = make_synthetic_dataset(64, 16, noise=0.0, seed=0)
    texts = [r.query_text for r in train_set + test_set]
    assert len(set(texts)) == len(texts)


def test_synthetic_rejects_tiny():
    with pytest.raises(ValueError):
        make_synthetic_dataset(3, 4)


def test_seed_streams_distinct_and_stable():
    s = seed_streams(0)
    assert len(set(s.values())) == 3 and s == seed_streams(0)
    assert s != seed_streams(1)


def test_train_zero_steps_equals_init():
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    cfg = RunConfig(steps=0, **SMALL)
    ckpt, log = train(cfg, train_set)
    model, _ = build_model(cfg, train_set)
    assert log == [] and ckpt.step == 0
    for k, v in model.state_dict().items():
        assert torch.equal(ckpt.state_dict[k], v)


def test_train_reduced_objective_logs_base_loss():
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    _, log = train(RunConfig(steps=5, eta=0.0, lam=0.0, **SMALL), train_set)
    assert all(r["total"] == r["l_vtc_cls"] and r["l_gfm"] == 0 and r["l_vtc_star"] == 0 for r in log)


def test_train_log_schema_and_file(tmp_path):
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    _, log = train(RunConfig(steps=3, **SMALL), train_set, log_path=tmp_path / "log.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert rows == log
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"step", "l_vtc_cls", "l_gfm", "l_vtc_star", "total"}


def test_train_reproducible():
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    cfg = RunConfig(steps=4, **SMALL)
    (c1, l1), (c2, l2) = train(cfg, train_set), train(cfg, train_set)
    assert l1 == l2
    assert all(torch.equal(c1.state_dict[k], c2.state_dict[k]) for k in c1.state_dict)


def test_train_divergence_dumps_last_finite(tmp_path):
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    train_set[3].image[:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(RunConfig(steps=3, **SMALL), train_set, log_path=tmp_path / "log.jsonl")
    dump = json.loads((tmp_path / "log.jsonl.diverged.json").read_text())
    assert dump["diverged_at"] == 0 and dump["last_finite"] is None


def test_checkpoint_round_trip_bit_exact(tmp_path):
    train_set, test_set = make_synthetic_dataset(8, 4, seed=0)
    # torch archives embed the file stem, so compare same-named files in two directories
    first, second = tmp_path / "a" / "ck.pt", tmp_path / "b" / "ck.pt"
    ckpt, _ = train(RunConfig(steps=2, **SMALL), train_set, checkpoint_path=first)
    Checkpoint.load(first).save(second)
    assert first.read_bytes() == second.read_bytes()
    assert evaluate(second, test_set) == evaluate(ckpt, test_set)


def test_checkpoint_stores_optimizer_state():
    train_set, _ = make_synthetic_dataset(8, 4, seed=0)
    ckpt, _ = train(RunConfig(steps=2, **SMALL), train_set)
    assert ckpt.optimizer_state["state"] and ckpt.run_config["steps"] == 2


def test_evaluate_twice_identical():
    train_set, test_set = make_synthetic_dataset(8, 4, seed=0)
    ckpt, _ = train(RunConfig(steps=0, **SMALL), train_set)
    assert evaluate(ckpt, test_set).to_json() == evaluate(ckpt, test_set).to_json()


def test_untrained_mean_rank_near_chance():
    # null model: MR of the true item among n is uniform on 1..n, mean (n+1)/2, sd sqrt((n^2-1)/12)/sqrt(n)
    n, seeds = 16, 10
    train_set, test_set = make_synthetic_dataset(16, 4, seed=0, n_test=n)
    mrs = [evaluate(train(RunConfig(steps=0, seed=s, **SMALL), train_set)[0], test_set).t2i.mr for s in range(seeds)]
    se = np.sqrt((n * n - 1) / 12) / np.sqrt(n * seeds)
    assert abs(np.mean(mrs) - (n + 1) / 2) < 4 * se


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.K, cfg.M, cfg.N, cfg.eta, cfg.lam, cfg.max_text_tokens) == (4, 4, 4, 0.1, 0.1, 77)
    assert (cfg.lr, cfg.batch_size) == (1e-4, 32)


def test_config_file_round_trip(tmp_path):
    cfg = RunConfig(K=2, aggregator="avg", lam=0.3, seed=9)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_config_lambda_alias(tmp_path):
    (tmp_path / "c.yaml").write_text("lambda: 0.0\neta: 0.0\n")
    assert load_config(tmp_path / "c.yaml").lam == 0.0


@pytest.mark.parametrize("text", ["bogus: 1\n", "K: {a: 1}\n", "- 1\n", "aggregator: max\n", "batch_size: 1\n"])
def test_config_rejects_bad_files(tmp_path, text):
    (tmp_path / "c.yaml").write_text(text)
    with pytest.raises(ValueError):
        load_config(tmp_path / "c.yaml")

import numpy as np
import pytest
import torch

from entityclip.encoders import (
    BOS,
    EOS,
    EncoderConfig,
    ImageEncoder,
    TextEncoder,
    TokenSequence,
    Tokenizer,
    adapt_cnn_grid,
    tokenize,
)
from oracles import central_difference, relative_error


def test_tokenize_empty_string():
    assert tokenize("", 77) == [BOS, EOS]


def test_tokenize_caps_long_text_at_max_len():
    text = " ".join(f"word{i}" for i in range(500))
    assert len(tokenize(text, 77)) == 77
    tok = Tokenizer.fit([text])
    ids = tok.encode(text, 77)
    assert len(ids) == 77 and ids[0] == BOS and ids[-1] == EOS


def test_tokenize_repeated_word_same_ids():
    tok = Tokenizer.fit(["abc def"])
    ids = tok.encode("abc abc", 77)
    assert ids[1] == ids[2]
    # byte fallback is deterministic too
    raw = tokenize("abc abc", 77)
    assert raw[1:4] == raw[4:7]


def test_tokenize_rejects_tiny_max_len():
    with pytest.raises(ValueError):
        tokenize("x", 1)


def test_tokenizer_never_exceeds_vocab():
    tok = Tokenizer.fit(["alpha beta"])
    ids = tok.encode("alpha gamma ümlaut beta", 77)
    assert max(ids) < tok.vocab_size


@pytest.fixture
def text_cfg():
    return EncoderConfig(model_dim=32, depth=2, vocab_size=300, image_size=4, patch_size=2, channels=3)


def test_encode_text_shape_and_determinism(text_cfg):
    enc = TextEncoder(text_cfg).eval()
    ids = [BOS, 10, 20, 30, EOS]
    a = enc.encode(ids)
    b = enc.encode(ids)
    assert a.tokens.shape == (5, 32)
    assert torch.equal(a.tokens, b.tokens)


def test_encode_text_sensitive_to_single_id(text_cfg):
    enc = TextEncoder(text_cfg).eval()
    a = enc.encode([BOS, 10, 20, 30, EOS]).tokens
    b = enc.encode([BOS, 10, 21, 30, EOS]).tokens
    assert not torch.equal(a, b)


def test_encode_text_out_of_vocab(text_cfg):
    enc = TextEncoder(text_cfg)
    with pytest.raises(IndexError):
        enc.encode([BOS, 300, EOS])


def test_encode_text_gradients_reach_all_parameters(text_cfg):
    enc = TextEncoder(text_cfg)
    out = enc.encode(list(range(1, 12))).tokens
    (out * torch.randn_like(out)).sum().backward()
    # every embedding row used gets a gradient; all other tensors fully
    for name, p in enc.named_parameters():
        assert p.grad is not None, name
        if name != "embed.weight":
            assert p.grad.abs().sum() > 0, name


def test_encode_image_vit_grid():
    cfg = EncoderConfig(model_dim=16, image_size=224, patch_size=32, channels=3)
    assert cfg.image_patch_count == 49
    enc = ImageEncoder(cfg).eval()
    seq = enc.encode(torch.rand(224, 224, 3))
    assert seq.tokens.shape == (50, 16) and seq.cls_index == 0


def test_encode_image_toy_grid_and_contrast():
    cfg = EncoderConfig(model_dim=8, image_size=2, patch_size=1, channels=3)
    enc = ImageEncoder(cfg).eval()
    zero = enc.encode(torch.zeros(2, 2, 3))
    one = enc.encode(torch.ones(2, 2, 3))
    assert zero.tokens.shape == (5, 8)
    assert not torch.allclose(zero.cls, one.cls)


def test_encode_image_accepts_patch_grid():
    cfg = EncoderConfig(model_dim=8, image_size=2, patch_size=1, channels=3)
    enc = ImageEncoder(cfg).eval()
    img = torch.rand(2, 2, 3)
    assert torch.equal(enc.encode(img).tokens, enc.encode(img.reshape(4, 3)).tokens)


def test_encode_image_dimension_mismatch():
    cfg = EncoderConfig(model_dim=8, image_size=4, patch_size=2, channels=3)
    with pytest.raises(ValueError):
        ImageEncoder(cfg).encode(torch.rand(4, 4, 1))


def test_cnn_grid_constant_cells():
    c = torch.arange(64, dtype=torch.float64)
    seq = adapt_cnn_grid(c.expand(7, 7, 64))
    assert seq.tokens.shape == (50, 64)
    assert torch.equal(seq.cls, c)


def test_cnn_grid_mean_and_row_major_order():
    grid = torch.eye(49, dtype=torch.float64).reshape(7, 7, 49)
    seq = adapt_cnn_grid(grid)
    expected = [sum(grid[r, c, d].item() for r in range(7) for c in range(7)) / 49 for d in range(49)]
    assert torch.allclose(seq.cls, torch.tensor(expected, dtype=torch.float64), atol=1e-15)
    assert torch.equal(seq.tokens[1 + 7 * 2 + 3], grid[2, 3])


def test_cnn_grid_non_square_warns():
    with pytest.warns(UserWarning, match="not 7x7"):
        seq = adapt_cnn_grid(torch.rand(3, 5, 4))
    assert len(seq) == 16


def test_token_sequence_invariants():
    with pytest.raises(ValueError):
        TokenSequence(torch.zeros(0, 4))
    with pytest.raises(ValueError):
        TokenSequence(torch.zeros(3, 4), cls_index=3)
    with pytest.raises(ValueError):
        TokenSequence(torch.tensor([[float("nan")]]))


def test_encoder_config_defaults():
    assert EncoderConfig().max_text_tokens == 77
    with pytest.raises(ValueError):
        EncoderConfig(model_dim=0)


def test_text_encoder_cls_gradient_matches_finite_differences(float64):
    cfg = EncoderConfig(model_dim=4, depth=1, vocab_size=265)
    enc = TextEncoder(cfg).double()
    ids = [BOS, 5, 9, EOS]
    w = torch.randn(4)

    def f():
        return (enc.encode(ids).cls * w).sum()

    params = [enc.blocks[0].attn.w_q.weight, enc.blocks[0].mlp[0].weight, enc.norm.weight]
    analytic = torch.autograd.grad(f(), params)
    numeric = central_difference(f, params)
    for a, n in zip(analytic, numeric):
        assert relative_error(a, n) < 1e-4


def test_image_encoder_batch_independence():
    cfg = EncoderConfig(model_dim=8, image_size=2, patch_size=1, channels=3)
    enc = ImageEncoder(cfg).eval()
    imgs = torch.rand(3, 2, 2, 3)
    batched = enc(imgs)
    single = torch.stack([enc(imgs[i : i + 1])[0] for i in range(3)])
    np.testing.assert_allclose(batched.detach().numpy(), single.detach().numpy(), atol=1e-6)

"""Image and text encoders producing token sequences with a class token at position 0."""

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .layers import TransformerBlock, trunc_normal_init

PAD, BOS, EOS = 0, 1, 2
_N_SPECIAL = 3
_N_BYTES = 256


@dataclass
class TokenSequence:
    """Token feature matrix ``[length, dim]`` with the class token at ``cls_index``."""

    tokens: torch.Tensor
    cls_index: int = 0

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise ValueError(f"tokens must be a non-empty [length, dim] matrix, got {tuple(self.tokens.shape)}")
        if not 0 <= self.cls_index < self.tokens.shape[0]:
            raise ValueError(f"cls_index {self.cls_index} outside [0, {self.tokens.shape[0]})")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("token features contain non-finite values")

    @property
    def cls(self):
        return self.tokens[self.cls_index]

    def __len__(self):
        return self.tokens.shape[0]


@dataclass
class EncoderConfig:
    model_dim: int = 32
    depth: int = 2
    heads: int = 1
    vocab_size: int = _N_SPECIAL + _N_BYTES
    max_text_tokens: int = 77
    image_size: int = 224
    patch_size: int = 32
    channels: int = 3
    image_backbone: str = "vit"

    def __post_init__(self):
        if self.model_dim <= 0 or self.depth < 1:
            raise ValueError("model_dim must be positive and depth >= 1")
        if self.max_text_tokens < 2:
            raise ValueError("max_text_tokens must leave room for begin/end markers")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.image_backbone not in ("vit", "cnn"):
            raise ValueError(f"unknown image_backbone {self.image_backbone!r}")

    @property
    def grid_side(self):
        return self.image_size // self.patch_size

    @property
    def image_patch_count(self):
        return self.grid_side ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels


class Tokenizer:
    """Whitespace word vocabulary with UTF-8 byte fallback.

    Ids 0-2 are PAD/BOS/EOS, 3-258 the raw bytes, then fitted words in
    frequency order. Unknown words are spelled out as bytes, so any string
    encodes without an unknown token.
    """

    def __init__(self, words=()):
        self.words = list(words)
        self._index = {w: _N_SPECIAL + _N_BYTES + i for i, w in enumerate(self.words)}

    @classmethod
    def fit(cls, texts, max_words=4096):
        counts = Counter(w for t in texts for w in t.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(w for w, _ in ranked[:max_words])

    @property
    def vocab_size(self):
        return _N_SPECIAL + _N_BYTES + len(self.words)

    def _word_ids(self, word):
        if word in self._index:
            return [self._index[word]]
        return [_N_SPECIAL + b for b in word.encode("utf-8")]

    def encode(self, text, max_len=77):
        if max_len < 2:
            raise ValueError("max_len must be >= 2")
        body = []
        for word in text.split():
            body.extend(self._word_ids(word))
            if len(body) >= max_len - 2:
                break
        return [BOS] + body[: max_len - 2] + [EOS]

    def decode_id(self, idx):
        if idx == PAD:
            return "<pad>"
        if idx == BOS:
            return "<bos>"
        if idx == EOS:
            return "<eos>"
        if idx < _N_SPECIAL + _N_BYTES:
            return bytes([idx - _N_SPECIAL]).decode("latin-1")
        return self.words[idx - _N_SPECIAL - _N_BYTES]


def tokenize(text, max_len=77, tokenizer=None):
    return (tokenizer or Tokenizer()).encode(text, max_len)


def pad_ids(batch_ids):
    """Right-pad id lists into ``(ids [B, L], mask [B, L])``."""
    length = max(len(ids) for ids in batch_ids)
    ids = torch.full((len(batch_ids), length), PAD, dtype=torch.long)
    mask = torch.zeros((len(batch_ids), length), dtype=torch.bool)
    for i, row in enumerate(batch_ids):
        ids[i, : len(row)] = torch.as_tensor(row, dtype=torch.long)
        mask[i, : len(row)] = True
    return ids, mask


class TextEncoder(nn.Module):
    """Token embedding + learned positions + pre-norm transformer; BOS position is the class token."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_tokens, cfg.model_dim))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.model_dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.model_dim)
        trunc_normal_init(self)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)

    def forward(self, ids, mask):
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise IndexError(f"token id out of range for vocab_size={self.cfg.vocab_size}")
        if ids.shape[1] > self.cfg.max_text_tokens:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds {self.cfg.max_text_tokens}")
        x = self.embed(ids) + self.pos[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)

    def encode(self, ids):
        """Encode one id list into a TokenSequence ``[len(ids), D]``."""
        if len(ids) == 0:
            raise ValueError("ids must be non-empty")
        ids_t, mask = pad_ids([list(ids)])
        return TokenSequence(self.forward(ids_t, mask)[0])


def image_to_patches(images, cfg):
    """``[B, H, W, C]`` pixel blocks (or ``[B, P, patch_dim]`` patch grids) -> ``[B, P, patch_dim]``."""
    if images.dim() == 3 and images.shape[1:] == (cfg.image_patch_count, cfg.patch_dim):
        return images
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.dim() != 4 or tuple(images.shape[1:]) != expected:
        raise ValueError(f"image shape {tuple(images.shape[1:])} does not match config {expected}")
    B, s, p = images.shape[0], cfg.grid_side, cfg.patch_size
    x = images.reshape(B, s, p, s, p, cfg.channels).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, s * s, cfg.patch_dim)


class ImageEncoder(nn.Module):
    """ViT-style encoder: linear patch embedding, prepended class token, transformer."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.model_dim)
        self.cls_token = nn.Parameter(torch.zeros(cfg.model_dim))
        self.pos = nn.Parameter(torch.zeros(cfg.image_patch_count + 1, cfg.model_dim))
        self.blocks = nn.ModuleList(TransformerBlock(cfg.model_dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.model_dim)
        trunc_normal_init(self)
        nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04)

    def forward(self, images):
        patches = self.patch_embed(image_to_patches(images, self.cfg))
        cls = self.cls_token.expand(patches.shape[0], 1, -1)
        x = torch.cat([cls, patches], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def encode(self, image):
        return TokenSequence(self.forward(torch.as_tensor(image).unsqueeze(0))[0])


def adapt_cnn_grid(feature_map):
    """Flatten an ``[H, W, D]`` CNN feature map row-major and prepend the mean token as cls.

    Accepts a leading batch dimension. Grids other than 7x7 are allowed with a warning.
    """
    fm = torch.as_tensor(feature_map)
    single = fm.dim() == 3
    if single:
        fm = fm.unsqueeze(0)
    if fm.dim() != 4:
        raise ValueError(f"feature map must be [H, W, D] or [B, H, W, D], got {tuple(fm.shape)}")
    B, H, W, D = fm.shape
    if (H, W) != (7, 7):
        warnings.warn(f"CNN grid is {H}x{W}, not 7x7; producing {H * W + 1} tokens", stacklevel=2)
    grid = fm.reshape(B, H * W, D)
    tokens = torch.cat([grid.mean(dim=1, keepdim=True), grid], dim=1)
    return TokenSequence(tokens[0]) if single else tokens


class CnnGridEncoder(nn.Module):
    """Small convolutional backbone whose feature grid is adapted into a token sequence."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        k = cfg.patch_size
        self.conv = nn.Sequential(
            nn.Conv2d(cfg.channels, cfg.model_dim, kernel_size=k, stride=k),
            nn.GELU(),
            nn.Conv2d(cfg.model_dim, cfg.model_dim, kernel_size=1),
        )
        self.norm = nn.LayerNorm(cfg.model_dim)

    def forward(self, images):
        expected = (self.cfg.image_size, self.cfg.image_size, self.cfg.channels)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"image shape {tuple(images.shape[1:])} does not match config {expected}")
        grid = self.conv(images.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tokens = adapt_cnn_grid(grid)
        return self.norm(tokens)

    def encode(self, image):
        return TokenSequence(self.forward(torch.as_tensor(image).unsqueeze(0))[0])


def build_image_encoder(cfg):
    return CnnGridEncoder(cfg) if cfg.image_backbone == "cnn" else ImageEncoder(cfg)


def load_image(path, cfg):
    """Load an image file (or ``.npy`` array) as a float ``[H, W, C]`` array at the configured size."""
    path = str(path)
    if path.endswith(".npy"):
        return np.load(path).astype(np.float32)
    from PIL import Image

    mode = "RGB" if cfg.channels == 3 else "L"
    img = Image.open(path).convert(mode).resize((cfg.image_size, cfg.image_size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return arr.reshape(cfg.image_size, cfg.image_size, cfg.channels)

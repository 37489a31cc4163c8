"""Run configuration and the flat key/value config file format."""

from dataclasses import asdict, dataclass, fields
from typing import Optional

import yaml

from .aggregation import STRATEGIES

EXPLANATION_SOURCES = ("llm", "stub", "caption-file")


@dataclass
class RunConfig:
    # experts and objective
    K: int = 4
    M: int = 4
    N: int = 4
    aggregator: str = "aga"
    eta: float = 0.1
    lam: float = 0.1
    temperature: float = 0.07
    learn_temperature: bool = True
    literal_eq15: bool = False
    duplicate_explanation_experts: bool = False
    blocks_per_expert: int = 1
    # optimisation
    batch_size: int = 32
    lr: float = 1e-4
    steps: int = 2000
    seed: int = 0
    freeze_encoders: bool = False
    # encoders
    model_dim: int = 64
    encoder_depth: int = 2
    heads: int = 1
    max_text_tokens: int = 77
    max_words: int = 4096
    image_size: Optional[int] = None
    patch_size: Optional[int] = None
    channels: Optional[int] = None
    image_backbone: str = "vit"
    # explanations
    explanation_source: str = "stub"
    explanation_cache: Optional[str] = None

    def __post_init__(self):
        if min(self.K, self.M, self.N) < 1:
            raise ValueError("expert counts K, M, N must be >= 1")
        if self.aggregator not in STRATEGIES:
            raise ValueError(f"aggregator must be one of {STRATEGIES}")
        if self.eta < 0 or self.lam < 0:
            raise ValueError("eta and lam must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (negatives need another sample)")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0 and lr positive")
        if self.explanation_source not in EXPLANATION_SOURCES:
            raise ValueError(f"explanation_source must be one of {EXPLANATION_SOURCES}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        nested = [k for k, v in values.items() if isinstance(v, (dict, list))]
        if nested:
            raise ValueError(f"config must be flat; nested values under {', '.join(nested)}")
        return cls(**values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ValueError(f"{path}: expected a key/value mapping")
    return RunConfig.from_dict(values)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)

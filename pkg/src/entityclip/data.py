"""Dataset records, JSON-lines ingestion and the synthetic desk-scale generator."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .explanation import ExplanationCache, stub_explain

# latent coordinates take one of four levels; words name the level, bins split halfway between levels
_LEVELS = np.array([-1.5, -0.5, 0.5, 1.5])
_BIN_EDGES = np.array([-1.0, 0.0, 1.0])


class DatasetError(ValueError):
    pass


@dataclass
class DatasetRecord:
    id: str
    image: Union[str, np.ndarray]
    query_text: str
    explanation_text: Optional[str] = None
    label: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.query_text:
            raise DatasetError(f"record {self.id!r} has an empty query_text")
        if not isinstance(self.image, str):
            self.image = np.asarray(self.image, dtype=np.float32)

    def to_json(self):
        out = {"id": self.id, "query_text": self.query_text}
        out["image"] = self.image if isinstance(self.image, str) else self.image.tolist()
        if self.explanation_text is not None:
            out["explanation_text"] = self.explanation_text
        if self.label is not None:
            out["label"] = self.label
        out.update(self.extra)
        return json.dumps(out)


def load_dataset(path, cache=None, fallback=stub_explain):
    """Read a JSON-lines dataset.

    Records without ``explanation_text`` are filled from ``cache`` (any
    generator) and otherwise from ``fallback``. Relative image paths are
    resolved against the dataset file's directory.
    """
    path = Path(path)
    if cache is not None and not isinstance(cache, ExplanationCache):
        cache = ExplanationCache(cache)
    records, seen = [], set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            missing = [k for k in ("id", "image", "query_text") if not raw.get(k)]
            if missing:
                raise DatasetError(f"{path}:{lineno}: missing {', '.join(missing)}")
            rid = str(raw.pop("id"))
            if rid in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            image = raw.pop("image")
            if isinstance(image, str) and not Path(image).is_absolute():
                image = str(path.parent / image)
            query = raw.pop("query_text")
            expl = raw.pop("explanation_text", None)
            if not expl:
                hit = cache.lookup_any(query) if cache is not None else None
                expl = hit.explanation if hit is not None else fallback(query)
            label = raw.pop("label", None)
            records.append(DatasetRecord(rid, image, query, expl, label, raw))
    return records


def save_dataset(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def _words(values, coords, noise, rng):
    bins = np.digitize(values[coords] + noise * rng.standard_normal(len(coords)), _BIN_EDGES)
    return " ".join(f"c{j}v{b}" for j, b in zip(coords, bins))


def make_synthetic_dataset(n_pairs=64, d_latent=16, noise=0.1, seed=0, n_test=None, channels=8):
    """Train/test splits of entity pairs generated from shared latent vectors.

    Every entity has a latent ``z ~ N(0, I_d)``. The image is an
    ``s x s x channels`` grid (``s = ceil(sqrt(d))``): patch ``j < d`` holds
    ``z_j`` times a fixed random unit direction, the rest are empty, and
    Gaussian noise of scale ``noise`` is added everywhere. Texts name
    coordinates as words ``c{j}v{q}`` where ``q`` is the quartile bin of
    ``z_j`` plus noise. The query covers the first three quarters of the
    coordinates; the explanation covers all of them, so it carries latent
    information absent from the query. ``n_pairs`` training entities and
    ``n_test`` (default ``n_pairs // 2``) distinct test entities are drawn.
    """
    if n_pairs < 4:
        raise ValueError("n_pairs must be >= 4")
    n_test = n_pairs // 2 if n_test is None else n_test
    rng = np.random.default_rng(seed)
    side = math.ceil(math.sqrt(d_latent))
    directions = rng.standard_normal((d_latent, channels))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    Z = _LEVELS[rng.integers(0, len(_LEVELS), size=(n_pairs + n_test, d_latent))]
    query_coords = np.arange(max(1, (3 * d_latent) // 4))
    all_coords = np.arange(d_latent)

    records = []
    for i, z in enumerate(Z):
        grid = np.zeros((side * side, channels))
        grid[:d_latent] = z[:, None] * directions
        grid += noise * rng.standard_normal(grid.shape)
        records.append(
            DatasetRecord(
                id=f"e{i:04d}",
                image=grid.reshape(side, side, channels),
                query_text=_words(z, query_coords, noise, rng),
                explanation_text=_words(z, all_coords, noise, rng),
            )
        )
    return records[:n_pairs], records[n_pairs:]

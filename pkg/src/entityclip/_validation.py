"""Input validation shared by the estimator and CLI."""

import numbers

from .data import DatasetRecord


def check_records(records, min_count=1, name="records"):
    """Return ``records`` as a list after checking element types and id uniqueness."""
    if isinstance(records, DatasetRecord):
        raise TypeError(f"{name} must be a sequence of DatasetRecord, got a single record")
    records = list(records)
    if len(records) < min_count:
        raise ValueError(f"{name} needs at least {min_count} item(s), got {len(records)}")
    ids = set()
    for i, rec in enumerate(records):
        if not isinstance(rec, DatasetRecord):
            raise TypeError(f"{name}[{i}] is {type(rec).__name__}, expected DatasetRecord")
        if rec.id in ids:
            raise ValueError(f"{name}: duplicate id {rec.id!r}")
        ids.add(rec.id)
    return records


def check_texts(texts, name="texts"):
    if isinstance(texts, str):
        texts = [texts]
    texts = list(texts)
    if not texts:
        raise ValueError(f"{name} is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str) or not t:
            raise ValueError(f"{name}[{i}] must be a non-empty string")
    return texts


def check_positive_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)

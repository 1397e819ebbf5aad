"""Shared helpers: stable seeding and canonical config hashing."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def stable_seed(*parts: Any) -> int:
    """Derive a 64-bit seed from arbitrary parts by hashing their repr.

    Used to give every glyph/step its own RNG stream so that parallel and
    sequential execution produce identical output for the same master seed.
    """
    key = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts: Any) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj: Any) -> str:
    """sha256 hex digest of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()

"""Deterministic synthetic gloss datasets for smoke runs and tests."""

from __future__ import annotations

import numpy as np

from .data import DatasetSplit, GlossEntry

_HEADS = ["a", "the", "any", "one", "some"]
_NOUNS = ["person", "animal", "tool", "place", "plant", "vessel", "sound", "colour", "liquid", "device",
          "building", "feeling", "garment", "machine", "container", "surface"]
_LINKS = ["that", "which", "who", "used to", "able to", "made to"]
_VERBS = ["carries", "holds", "makes", "moves", "covers", "cuts", "joins", "opens", "keeps", "lights"]
_TAILS = ["water", "food", "wood", "metal", "light", "heat", "stone", "cloth", "paper", "glass", "sand", "oil"]
_MODS = ["small", "large", "old", "soft", "bright", "round", "long", "quiet"]
_PLACES = ["house", "field", "river", "city", "kitchen", "forest", "ship", "market"]


def synthetic_glosses(n: int, seed: int = 0) -> list[str]:
    """``n`` distinct short English-like glosses."""
    rng = np.random.default_rng(seed)
    out, seen = [], set()
    while len(out) < n:
        words = [rng.choice(_HEADS), rng.choice(_MODS), rng.choice(_NOUNS), rng.choice(_LINKS),
                 rng.choice(_VERBS), rng.choice(_TAILS)]
        if rng.random() < 0.3:
            words.insert(1, rng.choice(_MODS))
        words += ["in", "the", rng.choice(_PLACES)]
        gloss = " ".join(str(w) for w in words)
        if gloss not in seen:
            seen.add(gloss)
            out.append(gloss)
    return out


def synthetic_split(n: int = 32, dim: int = 8, seed: int = 0, electra: bool = True,
                    role: str = "train", prefix: str = "syn") -> DatasetSplit:
    rng = np.random.default_rng([seed, dim])
    entries = []
    for i, gloss in enumerate(synthetic_glosses(n, seed)):
        vecs = rng.normal(size=(3, dim))
        entries.append(GlossEntry(f"{prefix}.{role}.{i}", gloss, vecs[0], vecs[1], vecs[2] if electra else None))
    return DatasetSplit(tuple(entries), "syn", role)

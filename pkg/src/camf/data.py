"""Loading and validating gloss datasets in the shared-task JSON layout."""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidInputError

EMBEDDING_DIM = 256
EMBEDDING_KEYS = ("sgns", "char", "electra")


@dataclass(frozen=True, eq=False)
class GlossEntry:
    id: str
    gloss: str
    sgns: np.ndarray
    char: np.ndarray
    electra: np.ndarray | None = None

    def embedding_matrix(self) -> np.ndarray:
        """The embedding set as an (m, d) matrix, m in {2, 3}."""
        rows = [self.sgns, self.char] + ([self.electra] if self.electra is not None else [])
        return np.stack(rows)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GlossEntry):
            return NotImplemented
        if self.id != other.id or self.gloss != other.gloss:
            return False
        if (self.electra is None) != (other.electra is None):
            return False
        pairs = [(self.sgns, other.sgns), (self.char, other.char)]
        if self.electra is not None:
            pairs.append((self.electra, other.electra))
        return all(np.array_equal(a, b) for a, b in pairs)

    def to_json(self) -> dict:
        obj = {"id": self.id, "gloss": self.gloss, "sgns": self.sgns.tolist(), "char": self.char.tolist()}
        if self.electra is not None:
            obj["electra"] = self.electra.tolist()
        return obj


@dataclass(frozen=True)
class DatasetSplit:
    entries: tuple[GlossEntry, ...]
    language: str = ""
    role: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def has_electra(self) -> bool:
        return bool(self.entries) and all(e.electra is not None for e in self.entries)

    def glosses(self) -> list[str]:
        return [e.gloss for e in self.entries]


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def _guess_meta(path: Path) -> tuple[str, str]:
    # shared-task files are named like "en.train.json"
    name = path.name.removesuffix(".gz").removesuffix(".json")
    parts = name.split(".")
    language = parts[0] if len(parts) > 1 else ""
    role = next((p for p in parts if p in ("train", "dev", "test", "trial")), "train")
    return language, role


def _vector(obj: dict, key: str, entry_id: str, dim: int) -> np.ndarray:
    raw = obj[key]
    if not isinstance(raw, list):
        raise DataError(f"{key!r} must be a list of numbers", entry_id)
    if len(raw) != dim:
        raise DataError(f"{key!r} has width {len(raw)}, expected {dim}", entry_id)
    try:
        vec = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"{key!r} contains non-numeric values", entry_id) from None
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise DataError(f"{key!r} contains non-finite values", entry_id)
    vec.setflags(write=False)
    return vec


def parse_entry(obj, index: int, dim: int = EMBEDDING_DIM, expect_electra: bool | None = None,
                require_gloss: bool = True) -> GlossEntry:
    if not isinstance(obj, dict):
        raise DataError(f"record {index} is not an object")
    entry_id = obj.get("id")
    if not isinstance(entry_id, str) or not entry_id:
        raise DataError(f"record {index} has a missing or non-string 'id'")
    for key in ("gloss", "sgns", "char") if require_gloss else ("sgns", "char"):
        if key not in obj:
            raise DataError(f"missing required key {key!r}", entry_id)
    gloss = obj.get("gloss", "")
    if not isinstance(gloss, str) or (require_gloss and not gloss.strip()):
        raise DataError("gloss must be a non-empty string", entry_id)
    has_electra = obj.get("electra") is not None
    if expect_electra is True and not has_electra:
        raise DataError("missing 'electra' embedding", entry_id)
    if expect_electra is False and has_electra:
        raise DataError("unexpected 'electra' embedding", entry_id)
    return GlossEntry(
        id=entry_id,
        gloss=gloss,
        sgns=_vector(obj, "sgns", entry_id, dim),
        char=_vector(obj, "char", entry_id, dim),
        electra=_vector(obj, "electra", entry_id, dim) if has_electra else None,
    )


def parse_records(records, dim: int = EMBEDDING_DIM, expect_electra: bool | None = None,
                  language: str = "", role: str = "train", require_gloss: bool = True) -> DatasetSplit:
    if not isinstance(records, list):
        raise DataError("dataset must be a JSON array of entry objects")
    entries, seen = [], set()
    for i, obj in enumerate(records):
        entry = parse_entry(obj, i, dim, expect_electra, require_gloss)
        if entry.id in seen:
            raise DataError("duplicate id", entry.id)
        seen.add(entry.id)
        entries.append(entry)
    return DatasetSplit(tuple(entries), language, role)


def _read_json(path: Path):
    try:
        with _open_text(path, "r") as fh:
            return json.load(fh)
    except (OSError, EOFError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path} is not valid UTF-8 JSON: {exc}") from exc


def load_dataset(path, expect_electra: bool | None = None, dim: int = EMBEDDING_DIM,
                 require_gloss: bool = True) -> DatasetSplit:
    """Load and validate a dataset file (``.json`` or ``.json.gz``).

    ``dim`` overrides the embedding width for synthetic fixtures; real data
    uses 256. With ``expect_electra`` set, Electra presence (or absence) is
    enforced for every entry. Test files without glosses load with
    ``require_gloss=False``.
    """
    path = Path(path)
    language, role = _guess_meta(path)
    return parse_records(_read_json(path), dim, expect_electra, language, role, require_gloss)


def load_references(path) -> list[tuple[str, str]]:
    """(id, gloss) pairs of a dataset file, ignoring its embeddings."""
    path = Path(path)
    records = _read_json(path)
    if not isinstance(records, list):
        raise DataError(f"{path} must be a JSON array of entry objects")
    out = []
    for i, obj in enumerate(records):
        if not isinstance(obj, dict) or not isinstance(obj.get("id"), str):
            raise DataError(f"record {i} of {path} has no string 'id'")
        gloss = obj.get("gloss")
        if not isinstance(gloss, str) or not gloss.strip():
            raise DataError("gloss must be a non-empty string", obj["id"])
        out.append((obj["id"], gloss))
    return out


def save_dataset(split: DatasetSplit, path) -> None:
    path = Path(path)
    with _open_text(path, "w") as fh:
        json.dump([e.to_json() for e in split.entries], fh, ensure_ascii=False)


@dataclass(frozen=True)
class SplitStats:
    entries: int
    mean_gloss_length: float
    has_electra: bool


def stats(split: DatasetSplit) -> SplitStats:
    if not len(split):
        raise InvalidInputError("cannot summarise an empty split")
    lengths = [len(e.gloss.split()) for e in split.entries]
    return SplitStats(len(lengths), math.fsum(lengths) / len(lengths), split.has_electra)

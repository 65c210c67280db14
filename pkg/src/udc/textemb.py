"""Frozen per-entity text embeddings: loaded from files or synthesised from generator latents."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from udc.ehr import KINDS, EntityVocab
from udc.errors import ContractError, DimensionError, ParseError


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TextEmbeddings:
    """Read-only tables keyed by entity class. They never enter an autodiff graph as parameters."""

    tables: Mapping[str, np.ndarray]
    source: str = "synthetic"
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        frozen = {k: _freeze(v) for k, v in self.tables.items()}
        for kind, table in frozen.items():
            if table.ndim != 2 or table.shape[0] == 0:
                raise DimensionError(f"{kind} text table must be a nonempty matrix")
        object.__setattr__(self, "tables", frozen)

    def __getitem__(self, kind: str) -> np.ndarray:
        return self.tables[kind]

    def dim(self, kind: str = "diagnosis") -> int:
        return self.tables[kind].shape[1]

    @property
    def E_D(self) -> np.ndarray:
        return self.tables["diagnosis"]

    @property
    def E_P(self) -> np.ndarray:
        return self.tables["procedure"]

    @property
    def E_M(self) -> np.ndarray:
        return self.tables["medication"]


def embedding_filename(kind: str) -> str:
    return f"text_{kind}.txt"


def write_embedding_file(path, kind: str, table: np.ndarray) -> None:
    table = np.asarray(table, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{kind} {table.shape[1]} {table.shape[0]}\n")
        for i, row in enumerate(table):
            fh.write(str(i) + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_embedding_file(path, vocab: EntityVocab | None = None) -> tuple[str, np.ndarray]:
    """Parse one ``class dim count`` file; rows may come in any order."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty embedding file")
    head = lines[0].split()
    if len(head) != 3:
        raise ParseError(f"{path}: header must be 'class dim count'")
    kind = head[0]
    try:
        dim, count = int(head[1]), int(head[2])
    except ValueError as exc:
        raise ParseError(f"{path}: non-integer dim/count in header") from exc
    if vocab is not None:
        if vocab.kind != kind:
            raise ParseError(f"{path}: file holds {kind!r} vectors, expected {vocab.kind!r}")
        count = vocab.size
    rows: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            idx = int(parts[0])
            vec = np.array([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: malformed row", [lineno]) from exc
        if len(vec) != dim:
            raise DimensionError(f"{path}:{lineno}: entity {idx} has {len(vec)} values, header says {dim}")
        if not 0 <= idx < count:
            raise ParseError(f"{path}:{lineno}: entity {idx} outside vocabulary of size {count}", [idx])
        if idx in rows:
            raise ParseError(f"{path}:{lineno}: entity {idx} listed twice", [idx])
        rows[idx] = vec
    missing = [i for i in range(count) if i not in rows]
    if missing:
        raise ParseError(f"entity {missing[0]} has no embedding", missing)
    return kind, np.stack([rows[i] for i in range(count)]) if count else np.zeros((0, dim))


def load_text_embeddings(path, vocabs: Mapping[str, EntityVocab]) -> TextEmbeddings:
    """Load one file per class from a directory (``text_<class>.txt``) or an explicit mapping."""
    if isinstance(path, Mapping):
        files = {k: Path(v) for k, v in path.items()}
    else:
        files = {k: Path(path) / embedding_filename(k) for k in vocabs}
    tables = {}
    for kind, vocab in vocabs.items():
        if kind not in files or not files[kind].exists():
            raise ContractError(f"no text embedding file for class {kind!r}")
        _, tables[kind] = read_embedding_file(files[kind], vocab)
    return TextEmbeddings(tables, source="file")


def save_text_embeddings(emb: TextEmbeddings, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind, table in emb.tables.items():
        write_embedding_file(directory / embedding_filename(kind), kind, table)


def synthesize_text_embeddings(latents: Mapping[str, np.ndarray], noise_level: float = 0.1,
                               seed: int = 0, dim: int = 64) -> TextEmbeddings:
    """One shared random linear map from latent space to ``dim`` columns, plus Gaussian noise.

    Map and noise entries have variance ``1 / dim``, so a unit latent yields a row of
    roughly unit norm and ``noise_level`` reads as a noise-to-signal ratio.
    """
    if dim < 1:
        raise DimensionError("text embedding dim must be positive")
    rng = np.random.default_rng(seed)
    latent_dim = next(iter(latents.values())).shape[1]
    scale = 1.0 / np.sqrt(dim)
    proj = rng.normal(scale=scale, size=(latent_dim, dim))
    tables = {}
    for kind in KINDS:
        if kind not in latents:
            continue
        lat = np.asarray(latents[kind], dtype=np.float64)
        noise = rng.normal(scale=scale, size=(lat.shape[0], dim))
        tables[kind] = lat @ proj + noise_level * noise
    return TextEmbeddings(tables, source="synthetic")

"""EHR data model, JSONL I/O, synthetic corpora, rarity and patient splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from udc.errors import ConfigError, ContractError, ParseError

log = logging.getLogger(__name__)

KINDS = ("diagnosis", "procedure", "medication")
_SHORT = {"diagnosis": "d", "procedure": "p", "medication": "m"}
TASKS = ("diag", "med")


@dataclass(frozen=True)
class EntityVocab:
    kind: str
    size: int
    text: dict[int, str] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown entity class {self.kind!r}")
        if self.size <= 0:
            raise ContractError("vocabulary size must be positive")

    def to_json(self) -> dict:
        out = {"class": self.kind, "size": self.size}
        if self.text:
            out["text"] = {str(k): v for k, v in sorted(self.text.items())}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EntityVocab":
        text = obj.get("text")
        return cls(obj["class"], int(obj["size"]),
                   {int(k): v for k, v in text.items()} if text else None)


def save_vocab(vocab: EntityVocab, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), indent=1))


def load_vocab(path) -> EntityVocab:
    return EntityVocab.from_json(json.loads(Path(path).read_text()))


def vocab_sizes(vocabs: dict[str, EntityVocab]) -> dict[str, int]:
    return {k: v.size for k, v in vocabs.items()}


@dataclass(frozen=True)
class Visit:
    diagnoses: tuple[int, ...]
    procedures: tuple[int, ...] = ()
    medications: tuple[int, ...] = ()

    @classmethod
    def of(cls, d: Iterable[int] = (), p: Iterable[int] = (), m: Iterable[int] = ()) -> "Visit":
        return cls(tuple(sorted(set(int(x) for x in d))),
                   tuple(sorted(set(int(x) for x in p))),
                   tuple(sorted(set(int(x) for x in m))))

    def ids(self, kind: str) -> tuple[int, ...]:
        return {"diagnosis": self.diagnoses, "procedure": self.procedures,
                "medication": self.medications}[kind]


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise ContractError(f"patient {self.patient_id} has no visits")


# -- JSONL ---------------------------------------------------------------

def save_dataset(records: Sequence[PatientRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            visits = [{"d": list(v.diagnoses), "p": list(v.procedures), "m": list(v.medications)}
                      for v in rec.visits]
            fh.write(json.dumps({"patient_id": rec.patient_id, "visits": visits}) + "\n")


def _find_sidecars(path: Path) -> dict[str, EntityVocab] | None:
    found = {}
    for kind in KINDS:
        cand = path.parent / f"vocab_{kind}.json"
        if cand.exists():
            found[kind] = load_vocab(cand)
    return found or None


def load_dataset(path, vocabs: dict[str, EntityVocab] | None = None) -> list[PatientRecord]:
    """Parse one patient per line; every problem is collected before raising.

    Vocabulary sidecars ``vocab_<class>.json`` next to ``path`` are used when
    ``vocabs`` is not given.
    """
    path = Path(path)
    if vocabs is None:
        vocabs = _find_sidecars(path)
    sizes = vocab_sizes(vocabs) if vocabs else {}
    records, problems = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid = str(obj["patient_id"])
                raw_visits = obj["visits"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                problems.append(f"line {lineno}: malformed record ({exc})")
                continue
            visits = []
            for vi, raw in enumerate(raw_visits):
                parts = {}
                for kind in KINDS:
                    ids = raw.get(_SHORT[kind], [])
                    if not isinstance(ids, list) or not all(isinstance(x, int) for x in ids):
                        problems.append(f"line {lineno}: visit {vi} field {_SHORT[kind]!r} is not an integer list")
                        ids = []
                    if any(b <= a for a, b in zip(ids, ids[1:])):
                        problems.append(f"line {lineno}: visit {vi} {kind} ids not strictly increasing: {ids}")
                    bad = [x for x in ids if x < 0 or (kind in sizes and x >= sizes[kind])]
                    if bad:
                        problems.append(f"line {lineno}: unknown {kind} id(s) {bad}")
                    parts[kind] = ids
                visits.append(Visit.of(parts["diagnosis"], parts["procedure"], parts["medication"]))
            if not visits:
                problems.append(f"line {lineno}: patient {pid} has no visits")
                continue
            records.append(PatientRecord(pid, tuple(visits)))
    if problems:
        raise ParseError(f"{len(problems)} problem(s) in {path}: " + "; ".join(problems[:10]), problems)
    return records


# -- synthetic corpora -------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_patients: int = 8000
    n_diseases: int = 200
    n_procedures: int = 80
    n_medications: int = 80
    latent_dim: int = 8
    n_clusters: int = 20
    cluster_spread: float = 0.35
    zipf_exponent: float = 1.2
    mean_visits: float = 2.5
    min_visits: int = 1
    max_visits: int = 8
    diseases_per_visit: float = 4.0
    procedures_per_visit: float = 3.0
    medications_per_visit: float = 5.0
    neighbours_per_visit: float = 1.5
    affinity: float = 6.0
    side_affinity: float = 20.0
    persistence: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_patients", "n_diseases", "n_procedures", "n_medications", "latent_dim",
                     "n_clusters", "min_visits", "max_visits"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.zipf_exponent <= 0:
            raise ConfigError("zipf_exponent must be > 0")
        if self.min_visits > self.max_visits:
            raise ConfigError("min_visits exceeds max_visits")
        if self.mean_visits < self.min_visits:
            raise ConfigError("mean_visits below min_visits")
        for per, size in (("diseases_per_visit", self.n_diseases),
                          ("procedures_per_visit", self.n_procedures),
                          ("medications_per_visit", self.n_medications)):
            val = getattr(self, per)
            if val < 1 or val > size:
                raise ConfigError(f"{per}={val} must lie in [1, {size}]")
        if self.neighbours_per_visit < 0 or self.neighbours_per_visit > self.diseases_per_visit:
            raise ConfigError("neighbours_per_visit must lie in [0, diseases_per_visit]")
        if self.affinity < 0 or self.side_affinity < 0:
            raise ConfigError("affinity and side_affinity must be non-negative")
        if not 0 <= self.noise <= 1 or not 0 <= self.persistence <= 1:
            raise ConfigError("noise and persistence must be probabilities")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _weighted_pick(rng, weights: np.ndarray, k: int, exclude: Iterable[int] = ()) -> list[int]:
    w = weights.copy()
    for e in exclude:
        w[e] = 0.0
    k = min(k, int(np.count_nonzero(w)))
    if k <= 0:
        return []
    return [int(x) for x in rng.choice(len(w), size=k, replace=False, p=w / w.sum())]


def _reversible_kernel(target: np.ndarray, affinity: np.ndarray, iters: int = 300) -> np.ndarray:
    """Row-stochastic kernel with ``target`` as stationary law, shaped by a symmetric affinity.

    Symmetric Sinkhorn scaling finds ``u`` with ``u * (W u) = target`` for
    ``W = outer(target, target) * affinity``; ``diag(u) W diag(u)`` is then a
    symmetric joint with both marginals equal to ``target``.
    """
    w = np.outer(target, target) * affinity
    u = np.ones_like(target)
    for _ in range(iters):
        u = u * np.sqrt(target / (u * (w @ u)))
    joint = u[:, None] * w * u[None, :]
    return joint / joint.sum(axis=1, keepdims=True)


def _world(cfg: SyntheticConfig) -> tuple[dict[str, np.ndarray], np.ndarray]:
    world = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients + 1)[0])
    centres = _unit(world.normal(size=(cfg.n_clusters, cfg.latent_dim)))
    latents = {}
    for kind, n in (("diagnosis", cfg.n_diseases), ("procedure", cfg.n_procedures),
                    ("medication", cfg.n_medications)):
        cluster = world.integers(0, cfg.n_clusters, size=n)
        latents[kind] = _unit(centres[cluster] + cfg.cluster_spread * world.normal(size=(n, cfg.latent_dim)))
    ranks = world.permutation(cfg.n_diseases) + 1
    zipf = ranks.astype(np.float64) ** -cfg.zipf_exponent
    return latents, zipf / zipf.sum()


def zipf_weights(cfg: SyntheticConfig) -> np.ndarray:
    """The per-disease Zipf weights a corpus generated from ``cfg`` is built around."""
    cfg.validate()
    return _world(cfg)[1]


def generate_synthetic(cfg: SyntheticConfig) -> tuple[list[PatientRecord], dict[str, np.ndarray]]:
    """Zipf-frequency diseases over clustered latent factors.

    A visit's diseases come from three routes: a parent disease (a Zipf draw
    on the first visit, a random current disease later) plus carried-over
    diseases, a Poisson number of latent neighbours of the parent drawn from a
    kernel whose stationary law is Zipf, and an independent background whose
    rates are solved so each disease's total inclusion probability is
    proportional to its Zipf weight. Each disease brings one procedure and one
    medication drawn with weight ``exp(side_affinity * (cos - 1))``; the rest of
    the Poisson quota is drawn with weight ``exp(affinity * (mean cos - 1))``
    to the visit's diseases. The returned
    latents (unit rows per entity) seed the text embeddings.
    """
    cfg.validate()
    patient_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients + 1)[1:]
    latents, zipf = _world(cfg)

    lat_d = latents["diagnosis"]
    kernel = _reversible_kernel(zipf, np.exp(cfg.affinity * (lat_d @ lat_d.T - 1.0)))
    sim_pd = latents["procedure"] @ lat_d.T
    sim_md = latents["medication"] @ lat_d.T

    # Target inclusion probability per visit is zipf-shaped; the independent
    # background route tops up whatever the parent/neighbour/carry-over routes miss.
    target = np.minimum(cfg.diseases_per_visit * zipf, 0.95)
    lam_n = cfg.neighbours_per_visit
    miss_nb = np.exp(-lam_n * zipf)
    background_first = np.clip(1 - (1 - target) / ((1 - zipf) * miss_nb), 0.0, 1.0)
    background_next = np.clip(1 - (1 - target) / ((1 - cfg.persistence * target) * miss_nb), 0.0, 1.0)

    def draw_diseases(rng, current: list[int]) -> list[int]:
        if current:
            chosen = {d for d in current if rng.random() < cfg.persistence}
            parent = current[int(rng.integers(len(current)))]
            background = background_next
        else:
            parent = int(rng.choice(cfg.n_diseases, p=zipf))
            chosen = {parent}
            background = background_first
        n_nb = int(rng.poisson(lam_n))
        if n_nb:
            chosen.update(int(d) for d in rng.choice(cfg.n_diseases, size=n_nb, p=kernel[parent]))
        noise = rng.random(cfg.n_diseases) < cfg.noise * zipf
        chosen.update(int(d) for d in np.flatnonzero((rng.random(cfg.n_diseases) < background) | noise))
        return sorted(chosen) if chosen else [parent]

    def mixed(w: np.ndarray) -> np.ndarray:
        return (1 - cfg.noise) * w / w.sum() + cfg.noise / len(w)

    def side_items(rng, sim: np.ndarray, diseases: list[int], count: int, per_disease: bool) -> list[int]:
        # Optionally one item per disease from its own sharp kernel, then fill from the pooled visit kernel.
        picked: set[int] = set()
        for d in diseases if per_disease else ():
            picked.add(int(rng.choice(sim.shape[0], p=mixed(np.exp(cfg.side_affinity * (sim[:, d] - 1.0))))))
        pooled = mixed(np.exp(cfg.affinity * (sim[:, diseases].mean(axis=1) - 1.0)))
        picked.update(_weighted_pick(rng, pooled, count - len(picked), exclude=picked))
        return sorted(picked)

    records = []
    p_geo = 1.0 / max(cfg.mean_visits - cfg.min_visits + 1, 1.0)
    for k, seq in enumerate(patient_seqs):
        rng = np.random.default_rng(seq)
        n_visits = min(cfg.min_visits - 1 + int(rng.geometric(p_geo)), cfg.max_visits)
        visits, current = [], []
        for t in range(n_visits):
            diseases = draw_diseases(rng, current)
            n_p = max(1, int(rng.poisson(cfg.procedures_per_visit)))
            n_m = max(1, int(rng.poisson(cfg.medications_per_visit)))
            procs = side_items(rng, sim_pd, diseases, n_p, False)
            meds = side_items(rng, sim_md, diseases, n_m, True)
            visits.append(Visit.of(diseases, procs, meds))
            current = sorted(set(diseases))
        records.append(PatientRecord(f"P{k:06d}", tuple(visits)))
    return records, latents


def synthetic_vocabs(cfg: SyntheticConfig) -> dict[str, EntityVocab]:
    return {
        "diagnosis": EntityVocab("diagnosis", cfg.n_diseases),
        "procedure": EntityVocab("procedure", cfg.n_procedures),
        "medication": EntityVocab("medication", cfg.n_medications),
    }


def synthetic_config_dict(cfg: SyntheticConfig) -> dict:
    return asdict(cfg)


# -- rarity ------------------------------------------------------------------

@dataclass
class RaritySplit:
    common: frozenset[int]
    rare: frozenset[int]
    eta: float
    counts: np.ndarray = field(repr=False)

    def is_rare(self, disease: int) -> bool:
        return disease in self.rare

    def label(self, disease: int) -> str:
        return "rare" if disease in self.rare else "common"


def disease_counts(dataset: Sequence[PatientRecord], n_diseases: int) -> np.ndarray:
    """Number of visits in which each disease appears."""
    counts = np.zeros(n_diseases, dtype=np.int64)
    for rec in dataset:
        for v in rec.visits:
            for d in v.diagnoses:
                counts[d] += 1
    return counts


def split_rarity(dataset: Sequence[PatientRecord], eta: float, n_diseases: int,
                 mode: str = "rank") -> RaritySplit:
    """Partition diseases into common and rare.

    ``rank`` (default): the top ``ceil(eta * |D|)`` diseases by occurrence count
    are common, ties going to the lower id. ``case_fraction``: a disease is
    common when it appears in at least ``eta`` of patients.
    """
    if not 0 < eta < 1:
        raise ContractError("eta must lie in (0, 1)")
    counts = disease_counts(dataset, n_diseases)
    if counts.sum() == 0:
        raise ContractError("dataset has no diagnosis occurrences")
    if mode == "rank":
        order = sorted(range(n_diseases), key=lambda d: (-counts[d], d))
        common = frozenset(order[:math.ceil(eta * n_diseases)])
    elif mode == "case_fraction":
        per_patient = np.zeros(n_diseases)
        for rec in dataset:
            for d in {d for v in rec.visits for d in v.diagnoses}:
                per_patient[d] += 1
        common = frozenset(int(d) for d in np.flatnonzero(per_patient / len(dataset) >= eta))
    else:
        raise ConfigError(f"unknown rarity mode {mode!r}")
    rare = frozenset(range(n_diseases)) - common
    return RaritySplit(common, rare, eta, counts)


# -- patients and targets ------------------------------------------------------

def split_patients(dataset: Sequence[PatientRecord], ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Seeded patient-level partition; part sizes by largest remainder."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ContractError("ratios must be non-negative and sum to 1")
    n = len(dataset)
    parts = sum(1 for r in ratios if r > 0)
    if n < parts:
        raise ContractError(f"{n} patients cannot fill {parts} partitions")
    raw = [r * n for r in ratios]
    sizes = [int(math.floor(x)) for x in raw]
    for i in sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))[: n - sum(sizes)]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    out, start = [], 0
    for size in sizes:
        out.append([dataset[i] for i in sorted(order[start:start + size])])
        start += size
    return tuple(out)


def extract_targets(record: PatientRecord, t: int, task: str) -> frozenset[int]:
    """Targets after observing ``t`` visits (1-based count of history visits).

    ``diag``: diagnoses of visit ``t+1`` with ``1 <= t < T``. ``med``: medications
    of visit ``t+1`` with ``0 <= t < T`` (that visit's diagnoses and procedures
    are model inputs, so an empty history is allowed).
    """
    n = len(record.visits)
    if task == "diag":
        if not 1 <= t < n:
            raise ContractError(f"diag target index t={t} outside [1, {n - 1}]")
        return frozenset(record.visits[t].diagnoses)
    if task == "med":
        if not 0 <= t < n:
            raise ContractError(f"med target index t={t} outside [0, {n - 1}]")
        return frozenset(record.visits[t].medications)
    raise ContractError(f"unknown task {task!r}")


def multi_hot(ids: Iterable[int], size: int) -> np.ndarray:
    out = np.zeros(size)
    out[list(ids)] = 1.0
    return out


def from_multi_hot(vec: Sequence[float]) -> frozenset[int]:
    return frozenset(int(i) for i in np.flatnonzero(np.asarray(vec) > 0.5))


def cooccurrence_context(dataset: Sequence[PatientRecord], disease_id: int):
    """(procedure set, medication set) for each visit containing ``disease_id``, in corpus order."""
    return [(frozenset(v.procedures), frozenset(v.medications))
            for rec in dataset for v in rec.visits if disease_id in v.diagnoses]


def cooccurrence_index(dataset: Sequence[PatientRecord], n_diseases: int) -> list[list[tuple]]:
    """All diseases at once: per disease, list of (record idx, visit idx)."""
    index: list[list[tuple]] = [[] for _ in range(n_diseases)]
    for ri, rec in enumerate(dataset):
        for vi, v in enumerate(rec.visits):
            for d in v.diagnoses:
                index[d].append((ri, vi))
    return index

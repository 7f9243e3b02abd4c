"""Molecule critics, clamp-linear normalization, reward aggregation and
top-k selection.

Druglikeness, synthesizability and solubility come from transparent proxies
(:func:`druglikeness_proxy`, :func:`sa_proxy`, :func:`crippen_logp`); docking
comes from an external table when one is given and otherwise from a
deterministic hash stub.  Every score records which path produced it.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._util import MASK64, hash_text, sha256_bytes
from .smiles import ELEMENTS, MolecularGraph, is_valid, parse, smiles_similarity
from .validation import check_text_list

logger = logging.getLogger(__name__)

CRIPPEN_SHA256 = "ab373982d77b9ad196ae80023c0c4b888cb42bd86b0079c033a07fbc611ed2da"
CRITICS = ("docking", "druglikeness", "synthesizability", "solubility", "similarity")


class ScoreError(ValueError):
    pass


class UnknownAtomType(ScoreError):
    pass


class MalformedRow(ScoreError):
    pass


class InvalidCandidate(ScoreError):
    pass


class FewerThanK(ScoreError):
    pass


class TableHashMismatch(ScoreError):
    pass


def _data_bytes(name: str) -> bytes:
    return resources.files("cmsmol").joinpath("data", name).read_bytes()


def load_proxy_config() -> dict:
    return json.loads(_data_bytes("proxy_config.json").decode("utf-8"))


def load_crippen_table(data: bytes | None = None, *, verify: bool = True) -> dict[str, float]:
    data = _data_bytes("crippen.tsv") if data is None else data
    if verify and sha256_bytes(data) != CRIPPEN_SHA256:
        raise TableHashMismatch("contribution table does not match its pinned hash")
    table = {}
    for line in data.decode("utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        name, value, *_ = line.split("\t")
        table[name] = float(value)
    return table


_CRIPPEN: dict[str, float] | None = None


def crippen_table() -> dict[str, float]:
    global _CRIPPEN
    if _CRIPPEN is None:
        _CRIPPEN = load_crippen_table()
    return _CRIPPEN


# ---------------------------------------------------------------------------
# logP

_HETERO = lambda el: el not in ("C", "H")


def atom_type(graph: MolecularGraph, i: int) -> str:
    """Contribution type of heavy atom ``i`` (see ``data/crippen.tsv``)."""
    a = graph.atoms[i]
    nbrs = graph.neighbors(i)
    el = a.element
    if el == "C":
        hetero = [(j, o) for j, o in nbrs if _HETERO(graph.atoms[j].element)]
        if a.aromatic:
            if hetero:
                return "C21"
            if sum(graph.atoms[j].aromatic for j, _ in nbrs) >= 3:
                return "C19"
            if len(nbrs) == 3:
                return "C20"
            return "C18"
        if any(o in ("double", "triple") for _, o in hetero):
            return "C5"
        if any(o == "triple" for _, o in nbrs):
            return "C7"
        if any(o == "double" for _, o in nbrs):
            return "C6"
        if hetero:
            return "C3" if a.hcount >= 2 else "C4"
        return "C1" if a.hcount >= 2 else "C2"
    if el == "N":
        if a.charge > 0:
            return "N13"
        if a.aromatic:
            return "N11"
        if any(o in ("double", "triple") for _, o in nbrs):
            return "N9"
        return ("N1", "N2", "N3")[min(max(len(nbrs), 1), 3) - 1]
    if el == "O":
        if a.aromatic:
            return "O1"
        if a.charge < 0:
            return "O12"
        if any(o == "double" for _, o in nbrs):
            return "O9"
        return "O2" if a.hcount else "O3"
    if el == "S":
        if a.aromatic:
            return "S3"
        if any(o == "double" and graph.atoms[j].element == "O" for j, o in nbrs):
            return "S2"
        return "S1"
    if el in ("P", "F", "Cl", "Br", "I"):
        return el
    raise UnknownAtomType(el)


def hydrogen_type(element: str) -> str:
    return {"C": "H1", "O": "H2", "N": "H3"}.get(element, "HS")


@dataclass(frozen=True)
class LogP:
    value: float
    fallback_atoms: int  # atoms typed with the element default


def crippen_logp_detail(graph: MolecularGraph) -> LogP:
    table = crippen_table()
    total, fallback = 0.0, 0
    for i, a in enumerate(graph.atoms):
        try:
            total += table[atom_type(graph, i)]
        except UnknownAtomType:
            total += table["X"]
            fallback += 1
        total += a.hcount * table[hydrogen_type(a.element)]
    return LogP(total, fallback)


def crippen_logp(graph: MolecularGraph) -> float:
    """Atom-contribution logP estimate.  Unknown elements use the default type."""
    return crippen_logp_detail(graph).value


# ---------------------------------------------------------------------------
# druglikeness and synthesizability proxies

def molecular_weight(graph: MolecularGraph) -> float:
    h = ELEMENTS["H"][1]
    return sum(ELEMENTS[a.element][1] + a.hcount * h for a in graph.atoms)


def h_donors(graph: MolecularGraph) -> int:
    return sum(1 for a in graph.atoms if a.element in ("N", "O") and a.hcount > 0)


def h_acceptors(graph: MolecularGraph) -> int:
    return sum(1 for a in graph.atoms if a.element in ("N", "O"))


def ramp(x: float, zero_lo: float, plateau_lo: float, plateau_hi: float, zero_hi: float) -> float:
    """1 on [plateau_lo, plateau_hi], linear down to 0 at zero_lo / zero_hi."""
    if plateau_lo <= x <= plateau_hi:
        return 1.0
    if x < plateau_lo:
        return 0.0 if x <= zero_lo else (x - zero_lo) / (plateau_lo - zero_lo)
    return 0.0 if x >= zero_hi else (zero_hi - x) / (zero_hi - plateau_hi)


def druglikeness_components(graph: MolecularGraph, config: dict | None = None) -> dict[str, float]:
    cfg = (config or load_proxy_config())["druglikeness"]
    raw = {"molecular_weight": molecular_weight(graph), "logp": crippen_logp(graph),
           "hbd": h_donors(graph), "hba": h_acceptors(graph)}
    return {k: ramp(raw[k], **cfg[k]) for k in raw}


def druglikeness_proxy(graph: MolecularGraph, config: dict | None = None) -> float:
    """Geometric mean of the four desirability ramps."""
    comps = druglikeness_components(graph, config)
    prod = math.prod(comps.values())
    return prod ** 0.25 if prod > 0 else 0.0


def sa_features(graph: MolecularGraph) -> dict[str, float]:
    ring = graph.ring_bonds()
    ring_degree = [0] * graph.n_atoms
    for bi in ring:
        b = graph.bonds[bi]
        ring_degree[b.begin] += 1
        ring_degree[b.end] += 1
    fused = sum(1 for bi in ring
                if ring_degree[graph.bonds[bi].begin] >= 3 and ring_degree[graph.bonds[bi].end] >= 3)
    stereo = sum(1 for a in graph.atoms if a.chirality) + sum(graph.source.count(c) for c in "/\\")
    n = graph.n_atoms
    hetero = sum(1 for a in graph.atoms if _HETERO(a.element))
    return {"atoms": n, "rings": graph.ring_count(), "fused_bonds": fused, "stereo": stereo,
            "hetero_fraction": hetero / n if n else 0.0}


def sa_proxy(graph: MolecularGraph, config: dict | None = None) -> float:
    """1 + 9 * c / (c + h), c a weighted feature sum; 1 means easy."""
    cfg = (config or load_proxy_config())["sa"]
    feats = sa_features(graph)
    c = sum(cfg["weights"][k] * feats[k] for k in feats)
    return 1.0 + 9.0 * c / (c + cfg["squash_half"])


# ---------------------------------------------------------------------------
# docking

def docking_stub(smiles: str) -> float:
    """Deterministic placeholder docking score in [-14, -6]."""
    return -6.0 - 8.0 * (hash_text(smiles) / MASK64)


@dataclass
class ExternalScores:
    table: dict[str, dict[str, float]]
    skipped: int = 0

    def get(self, smiles: str) -> dict[str, float] | None:
        return self.table.get(smiles)


def parse_external_scores(text: str) -> ExternalScores:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or [h.strip() for h in header[:2]] != ["smiles", "docking"]:
        raise MalformedRow("header must start with smiles,docking")
    cols = [h.strip() for h in header]
    unknown = set(cols[1:]) - set(CRITICS)
    if unknown:
        raise MalformedRow(f"unknown columns {sorted(unknown)}")
    table, skipped = {}, 0
    for row in reader:
        if not row or not "".join(row).strip():
            continue
        try:
            if len(row) != len(cols):
                raise MalformedRow("wrong column count")
            values = {c: float(v) for c, v in zip(cols[1:], row[1:]) if v.strip()}
            if not all(math.isfinite(v) for v in values.values()):
                raise MalformedRow("non-finite value")
        except (ValueError, MalformedRow):
            skipped += 1
            continue
        table[row[0].strip()] = values
    if skipped:
        logger.warning("external scores: skipped %d malformed rows", skipped)
    return ExternalScores(table, skipped)


def external_scores(path) -> ExternalScores:
    with open(path, encoding="utf-8") as fh:
        return parse_external_scores(fh.read())


# ---------------------------------------------------------------------------
# vectors and rewards

@dataclass(frozen=True)
class ScoreVector:
    docking: float | None = None
    druglikeness: float | None = None
    synthesizability: float | None = None
    solubility: float | None = None
    similarity: float | None = None
    validity: bool = True
    provenance: tuple[tuple[str, str], ...] = ()

    def as_dict(self) -> dict:
        d = {c: getattr(self, c) for c in CRITICS}
        d["validity"] = self.validity
        d["provenance"] = dict(self.provenance)
        return d


@dataclass(frozen=True)
class NormBounds:
    bounds: Mapping[str, tuple[float, float, str]]
    weights: Mapping[str, float]

    def __post_init__(self):
        for c, (lo, hi, direction) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"bounds for {c} need lo < hi")
            if direction not in ("max", "min"):
                raise ValueError(f"direction for {c} must be max or min")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @classmethod
    def default(cls, config: dict | None = None) -> "NormBounds":
        cfg = config or load_proxy_config()
        bounds = {c: (float(lo), float(hi), d) for c, (lo, hi, d) in cfg["bounds"].items()}
        return cls(bounds, dict(cfg["weights"]))

    def without_similarity(self) -> "NormBounds":
        """Equal weights over the four critics other than similarity."""
        rest = [c for c in CRITICS if c != "similarity"]
        return NormBounds(self.bounds, {**{c: 1.0 / len(rest) for c in rest}, "similarity": 0.0})


def normalize(critic: str, value: float, bounds: NormBounds) -> float:
    lo, hi, direction = bounds.bounds[critic]
    x = (value - lo) / (hi - lo) if direction == "max" else (hi - value) / (hi - lo)
    return min(1.0, max(0.0, x))


def normalized_reward(v: ScoreVector, b: NormBounds) -> float:
    """Weighted mean of clamp-normalized critics (higher is better)."""
    if not v.validity:
        raise InvalidCandidate("invalid molecules carry no reward")
    total = 0.0
    for critic, w in b.weights.items():
        if w == 0:
            continue
        value = getattr(v, critic)
        if value is None:
            raise ScoreError(f"critic {critic} has weight {w} but no value")
        total += w * normalize(critic, value, b)
    return total


@dataclass
class Scorers:
    """Critic sources: external table when available, proxies otherwise."""
    external: ExternalScores | None = None
    config: dict = field(default_factory=load_proxy_config)

    def score(self, smiles: str, reference: str | None = None) -> ScoreVector:
        validity = is_valid(smiles)
        if not validity.valid:
            return ScoreVector(validity=False)
        graph = parse(smiles)
        ext = self.external.get(smiles) if self.external else None
        ext = ext or {}
        prov = {}
        values = {}
        for critic, proxy in (("druglikeness", lambda: druglikeness_proxy(graph, self.config)),
                              ("synthesizability", lambda: sa_proxy(graph, self.config)),
                              ("solubility", lambda: crippen_logp(graph))):
            if critic in ext:
                values[critic], prov[critic] = ext[critic], "external"
            else:
                values[critic], prov[critic] = proxy(), "proxy"
        if "docking" in ext:
            values["docking"], prov["docking"] = ext["docking"], "external"
        else:
            values["docking"], prov["docking"] = docking_stub(smiles), "stub"
        if reference is not None:
            values["similarity"], prov["similarity"] = smiles_similarity(smiles, reference), "proxy"
        return ScoreVector(validity=True, provenance=tuple(sorted(prov.items())), **values)


def score_candidate(candidate: str, reference: str | None, scorers: Scorers | None = None) -> ScoreVector:
    if reference is not None and not is_valid(reference).valid:
        raise ScoreError("reference molecule is invalid")
    return (scorers or Scorers()).score(candidate, reference)


# ---------------------------------------------------------------------------
# selection and reporting

@dataclass(frozen=True)
class Scored:
    smiles: str
    vector: ScoreVector
    reward: float | None


@dataclass
class TopK:
    items: list[Scored]
    mean_reward: float
    fewer_than_k: bool


def select_top(scored: Iterable[Scored], k: int = 10) -> TopK:
    """Valid candidates sorted by reward (descending), ties by SMILES."""
    pool = sorted((s for s in scored if s.vector.validity and s.reward is not None),
                  key=lambda s: (-s.reward, s.smiles))
    top = pool[:k]
    mean = float(np.mean([s.reward for s in top])) if top else float("nan")
    return TopK(top, mean, len(pool) < k)


@dataclass
class MoleculeResult:
    source: str
    n_candidates: int
    n_valid: int
    top: TopK
    critic_means: dict[str, float]
    provenance: str

    @property
    def reward(self) -> float:
        return self.top.mean_reward

    def to_record(self) -> dict:
        reward = None if math.isnan(self.reward) else self.reward
        return {"source": self.source, "n_candidates": self.n_candidates, "n_valid": self.n_valid,
                "reward": reward, "fewer_than_k": self.top.fewer_than_k,
                "critic_means": {c: (None if math.isnan(v) else v) for c, v in self.critic_means.items()},
                "provenance": self.provenance,
                "top": [{"smiles": s.smiles, "reward": s.reward, **s.vector.as_dict()} for s in self.top.items]}

    @classmethod
    def from_record(cls, rec: dict) -> "MoleculeResult":
        items = []
        for t in rec["top"]:
            vec = ScoreVector(**{c: t[c] for c in CRITICS}, validity=t["validity"],
                              provenance=tuple(sorted(t["provenance"].items())))
            items.append(Scored(t["smiles"], vec, t["reward"]))
        nan = lambda v: float("nan") if v is None else v
        return cls(rec["source"], rec["n_candidates"], rec["n_valid"],
                   TopK(items, nan(rec["reward"]), rec["fewer_than_k"]),
                   {c: nan(v) for c, v in rec["critic_means"].items()}, rec["provenance"])


def _provenance_label(vectors: Iterable[ScoreVector]) -> str:
    seen = sorted({f"{c}={p}" for v in vectors for c, p in v.provenance})
    return ";".join(seen)


def score_molecule(source: str, candidates: Sequence[str], scorers: Scorers | None = None,
                   bounds: NormBounds | None = None, k: int = 10) -> MoleculeResult:
    """Score all candidates of one source molecule and keep the top ``k``."""
    scorers = scorers or Scorers()
    bounds = bounds or NormBounds.default(scorers.config)
    scored = []
    for smi in candidates:
        vec = scorers.score(smi, source)
        scored.append(Scored(smi, vec, normalized_reward(vec, bounds) if vec.validity else None))
    top = select_top(scored, k)
    means = {c: float(np.mean([getattr(s.vector, c) for s in top.items])) if top.items else float("nan")
             for c in CRITICS}
    return MoleculeResult(source, len(candidates), sum(s.vector.validity for s in scored), top, means,
                          _provenance_label(s.vector for s in top.items))


def score_original(source: str, scorers: Scorers | None = None, bounds: NormBounds | None = None) -> tuple[ScoreVector, float]:
    """Critics of the unmodified molecule with similarity excluded (weights 0.25 x 4)."""
    scorers = scorers or Scorers()
    bounds = (bounds or NormBounds.default(scorers.config)).without_similarity()
    vec = scorers.score(source, None)
    return vec, normalized_reward(vec, bounds)


REPORT_COLUMNS = ("target", "algorithm", "n_molecules", "avg_norm_reward", "avg_top10pct_norm_reward",
                  "docking", "druglikeness", "synthesizability", "solubility", "similarity", "provenance")


def report(results: Sequence[MoleculeResult], *, target: str = "stub", algorithm: str = "CMS") -> dict:
    """One benchmark row: per-critic means over molecules, mean reward, and
    the mean reward of the best 10% of molecules (at least one)."""
    rewards = sorted((r.reward for r in results if not math.isnan(r.reward)), reverse=True)
    n_top = max(1, int(math.ceil(0.1 * len(rewards)))) if rewards else 0
    row = {
        "target": target, "algorithm": algorithm, "n_molecules": len(results),
        "avg_norm_reward": float(np.mean(rewards)) if rewards else float("nan"),
        "avg_top10pct_norm_reward": float(np.mean(rewards[:n_top])) if rewards else float("nan"),
    }
    for c in CRITICS:
        vals = [r.critic_means[c] for r in results if not math.isnan(r.critic_means.get(c, float("nan")))]
        row[c] = float(np.mean(vals)) if vals else float("nan")
    row["provenance"] = ";".join(sorted({p for r in results for p in r.provenance.split(";") if p}))
    return row


def report_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


class MoleculeScorer(BaseEstimator):
    """``predict`` returns normalized rewards (NaN for invalid SMILES);
    ``transform`` returns the raw critic matrix."""

    def __init__(self, reference=None, external_path=None, include_similarity=True):
        self.reference = reference
        self.external_path = external_path
        self.include_similarity = include_similarity

    def fit(self, X=None, y=None):
        self.scorers_ = Scorers(external_scores(self.external_path) if self.external_path else None)
        bounds = NormBounds.default(self.scorers_.config)
        self.bounds_ = bounds if self.include_similarity and self.reference else bounds.without_similarity()
        return self

    def _vectors(self, X):
        X = check_text_list(X)
        ref = self.reference if self.include_similarity else None
        return [self.scorers_.score(x, ref) for x in X]

    def transform(self, X) -> np.ndarray:
        rows = []
        for v in self._vectors(X):
            rows.append([np.nan if getattr(v, c) is None else getattr(v, c) for c in CRITICS])
        return np.array(rows, dtype=float)

    def predict(self, X) -> np.ndarray:
        return np.array([normalized_reward(v, self.bounds_) if v.validity else np.nan
                         for v in self._vectors(X)])

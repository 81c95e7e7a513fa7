"""Semantic grounding: unit storage, exact cosine retrieval and evidence aggregation."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer
from sklearn.metrics import f1_score
from sklearn.preprocessing import MultiLabelBinarizer
from sqlalchemy.orm import Session

from .. import models
from ..error_handlers import DataError, DimensionMismatchError, EmptyIndexError, WhitelistError
from ..schemas import GroundedTargetDoc, ScoredLabel
from ..seed_units import ORGAN_ANATOMY

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 256
TOKEN_PATTERN = r"(?u)\b\w+\b"


@dataclass(frozen=True)
class SemanticUnit:
    id: int
    symptom: str
    diagnosis: str
    organ: str
    anatomy: Tuple[str, ...] = ()
    basis: str = ""

    @classmethod
    def from_record(cls, record: models.SemanticUnitRecord) -> "SemanticUnit":
        return cls(record.id, record.symptom, record.diagnosis, record.organ, tuple(record.anatomy or ()), record.basis or "")


class HashingEmbedder:
    """Lowercase word tokens hashed into a fixed-width, L2-normalised count vector."""

    def __init__(self, dimension: int = DEFAULT_DIMENSION):
        self.dimension = dimension
        self.embedder_id = f"hashing-{dimension}"
        self._vectorizer = HashingVectorizer(
            n_features=dimension,
            lowercase=True,
            token_pattern=TOKEN_PATTERN,
            alternate_sign=False,
            norm="l2",
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return self._vectorizer.transform(list(texts)).toarray()


class PrecomputedEmbedder:
    """Looks texts up in a table of externally computed vectors."""

    def __init__(self, vectors: Mapping[str, Sequence[float]], embedder_id: str = "precomputed"):
        table = {text: np.asarray(v, dtype=np.float64) for text, v in vectors.items()}
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise DimensionMismatchError("precomputed vectors must share one dimension")
        self.dimension = dims.pop()
        self.embedder_id = embedder_id
        self._table = table

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in texts if t not in self._table]
        if missing:
            raise DataError(f"no precomputed vector for {len(missing)} text(s), e.g. '{missing[0]}'")
        vectors = np.array([self._table[t] for t in texts])
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        return np.divide(vectors, norms, out=np.zeros_like(vectors), where=norms > 0)


def embed_text(text: str, embedder=None) -> np.ndarray:
    if not text or not text.strip():
        raise DataError("cannot embed empty text", stage="ground")
    embedder = embedder or HashingEmbedder()
    vector = embedder.embed([text])[0]
    if not np.any(vector):
        raise DataError(f"text has no embeddable tokens: '{text}'", stage="ground")
    return vector


def validate_unit(unit: SemanticUnit, whitelist: Mapping[str, Sequence[str]] = ORGAN_ANATOMY) -> None:
    if unit.organ not in whitelist:
        raise WhitelistError(f"unit {unit.id}: organ '{unit.organ}' is not in the organ whitelist")
    unknown = [a for a in unit.anatomy if a not in whitelist[unit.organ]]
    if unknown:
        raise WhitelistError(f"unit {unit.id}: anatomy {unknown} not allowed for organ '{unit.organ}'")


class EmbeddingIndex:
    """Exact cosine index over semantic units, keyed by unit id."""

    def __init__(self, embedder=None, whitelist: Mapping[str, Sequence[str]] = ORGAN_ANATOMY):
        self.embedder = embedder or HashingEmbedder()
        self.whitelist = whitelist
        self.units: Dict[int, SemanticUnit] = {}
        self._ids = np.zeros(0, dtype=np.int64)
        self._vectors = np.zeros((0, self.embedder.dimension))

    def __len__(self) -> int:
        return len(self.units)

    @property
    def dimension(self) -> int:
        return self.embedder.dimension

    def add_units(self, units: Sequence[SemanticUnit]) -> None:
        for unit in units:
            validate_unit(unit, self.whitelist)
            if unit.id in self.units:
                raise DataError(f"duplicate semantic unit id {unit.id}")
        if not units:
            return
        vectors = np.vstack([embed_text(u.symptom, self.embedder) for u in units])
        for unit in units:
            self.units[unit.id] = unit
        self._ids = np.concatenate([self._ids, [u.id for u in units]]).astype(np.int64)
        self._vectors = np.vstack([self._vectors, vectors])
        logger.info(f"Indexed {len(units)} units ({len(self.units)} total, {self.embedder.embedder_id})")

    def search(self, query_vector: np.ndarray, k: int) -> List[Tuple[int, float]]:
        if not self.units:
            raise EmptyIndexError("semantic index is empty; ingest units first", stage="ground")
        if k < 1:
            raise DataError(f"k must be >= 1, got {k}")
        scores = self._vectors @ np.asarray(query_vector, dtype=np.float64)
        order = np.lexsort((self._ids, -scores))[:k]
        return [(int(self._ids[i]), float(scores[i])) for i in order]


def retrieve(index: EmbeddingIndex, query: str, k: int = 5) -> List[Tuple[SemanticUnit, float]]:
    """Top-k units by cosine similarity, ties by ascending unit id."""
    hits = index.search(embed_text(query, index.embedder), k)
    return [(index.units[unit_id], score) for unit_id, score in hits]


@dataclass
class GroundedTarget:
    organ: str
    organ_score: float
    region: Optional[str]
    region_score: float
    auxiliary_organs: List[Tuple[str, float]] = field(default_factory=list)
    auxiliary_regions: List[Tuple[str, float]] = field(default_factory=list)
    query: str = ""
    retrieved: List[Tuple[int, float]] = field(default_factory=list)

    def to_doc(self) -> GroundedTargetDoc:
        return GroundedTargetDoc(
            query=self.query,
            organ=self.organ,
            organ_score=self.organ_score,
            region=self.region,
            region_score=self.region_score,
            task_type=None,
            auxiliary_organs=[ScoredLabel(name=n, score=s) for n, s in self.auxiliary_organs],
            auxiliary_regions=[ScoredLabel(name=n, score=s) for n, s in self.auxiliary_regions],
            retrieved=[ScoredLabel(name=str(i), score=s) for i, s in self.retrieved],
        )


def _vote(entries: List[Tuple[str, float, int]]) -> List[Tuple[str, float]]:
    """Sum scores per label; order by score, then smallest supporting unit id, then first appearance."""
    totals: Dict[str, List] = {}
    for position, (label, score, unit_id) in enumerate(entries):
        if label not in totals:
            totals[label] = [0.0, unit_id, position]
        totals[label][0] += max(score, 0.0)
        totals[label][1] = min(totals[label][1], unit_id)
    ranked = sorted(totals.items(), key=lambda item: (-item[1][0], item[1][1], item[1][2]))
    return [(label, values[0]) for label, values in ranked]


def aggregate_targets(retrieved: Sequence[Tuple[SemanticUnit, float]], query: str = "") -> GroundedTarget:
    """Cosine-sum vote for the organ, then for regions within the winning organ."""
    if not retrieved:
        raise EmptyIndexError("nothing retrieved to aggregate", stage="ground")
    organs = _vote([(unit.organ, score, unit.id) for unit, score in retrieved])
    organ, organ_score = organs[0]
    regions = _vote([
        (location, score, unit.id)
        for unit, score in retrieved if unit.organ == organ
        for location in unit.anatomy
    ])
    region, region_score = regions[0] if regions else (None, 0.0)
    return GroundedTarget(
        organ=organ,
        organ_score=organ_score,
        region=region,
        region_score=region_score,
        auxiliary_organs=organs[1:],
        auxiliary_regions=regions[1:],
        query=query,
        retrieved=[(unit.id, score) for unit, score in retrieved],
    )


def grounding_f1(predictions, gold, average: str = "macro") -> float:
    """Macro or micro F1 over the classes seen in gold or predictions.

    Items may be single labels or collections of labels (multi-label).
    """
    if len(predictions) != len(gold):
        raise DimensionMismatchError(f"{len(predictions)} predictions for {len(gold)} gold labels")
    if average not in ("macro", "micro"):
        raise DataError(f"averaging must be 'macro' or 'micro', got '{average}'")
    if not gold:
        return 0.0

    multilabel = any(isinstance(item, (list, tuple, set, frozenset)) for item in list(gold) + list(predictions))
    if multilabel:
        gold_sets = [set(item) if isinstance(item, (list, tuple, set, frozenset)) else {item} for item in gold]
        pred_sets = [set(item) if isinstance(item, (list, tuple, set, frozenset)) else {item} for item in predictions]
        classes = sorted(set().union(*gold_sets, *pred_sets))
        if not classes:
            return 0.0
        binarizer = MultiLabelBinarizer(classes=classes)
        y_true = binarizer.fit_transform(gold_sets)
        y_pred = binarizer.transform(pred_sets)
        return float(f1_score(y_true, y_pred, average=average, zero_division=0))

    classes = sorted(set(gold) | set(predictions))
    return float(f1_score(list(gold), list(predictions), labels=classes, average=average, zero_division=0))


class UnitStore:
    """Semantic units persisted through SQLAlchemy."""

    def __init__(self, db: Session):
        self.db = db

    def count(self) -> int:
        return self.db.query(models.SemanticUnitRecord).count()

    def clear(self) -> int:
        removed = self.db.query(models.SemanticUnitRecord).delete()
        self.db.commit()
        return removed

    def all_units(self) -> List[SemanticUnit]:
        records = self.db.query(models.SemanticUnitRecord).order_by(models.SemanticUnitRecord.id).all()
        return [SemanticUnit.from_record(r) for r in records]

    def build_index(self, embedder=None, whitelist: Mapping[str, Sequence[str]] = ORGAN_ANATOMY) -> EmbeddingIndex:
        index = EmbeddingIndex(embedder, whitelist)
        index.add_units(self.all_units())
        return index

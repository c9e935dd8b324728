"""
Re-identification: resolve tracklets to participant identities by matching
face embeddings against a gallery of anchor embeddings.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from src.models.records import NONE_LABEL
from src.services.tracking_service import Tracklet
from src.utils.errors import ConfigError, DataError, UndefinedSimilarityError

logger = logging.getLogger(__name__)

UNIDENTIFIED = "UNIDENTIFIED"
RESERVED_IDS = {UNIDENTIFIED, NONE_LABEL}
UNIT_TOLERANCE = 1e-6


class GalleryFile(BaseModel):
    dimension: int = Field(gt=0)
    threshold: float = Field(default=0.6, ge=-1.0, le=1.0)
    participants: Dict[str, List[List[float]]]


class Gallery:
    """Anchor embeddings per participant; immutable after construction."""

    def __init__(self, entries: Dict[str, np.ndarray], threshold: float = 0.6):
        if not entries:
            raise ConfigError("gallery has no participants")
        if not -1.0 <= threshold <= 1.0:
            raise ConfigError(f"gallery threshold {threshold} outside [-1, 1]")
        dims = {np.asarray(a).shape[-1] for a in entries.values()}
        if len(dims) != 1:
            raise ConfigError(f"gallery anchors have mixed dimensions {sorted(dims)}")
        self.dimension = dims.pop()
        self.threshold = float(threshold)
        self.participant_ids: List[str] = sorted(entries)

        blocks = []
        starts = []
        for pid in self.participant_ids:
            if pid in RESERVED_IDS:
                raise ConfigError(f"participant id {pid!r} is reserved")
            anchors = np.atleast_2d(np.asarray(entries[pid], dtype=np.float64))
            if anchors.shape[0] == 0:
                raise ConfigError(f"participant {pid!r} has no anchors")
            norms = np.linalg.norm(anchors, axis=1)
            if np.any(norms == 0) or not np.all(np.isfinite(anchors)):
                raise ConfigError(f"participant {pid!r} has a zero or non-finite anchor")
            if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
                logger.warning(f"[ReIDService] normalizing non-unit anchors for participant {pid}")
                anchors = anchors / norms[:, None]
            starts.append(sum(b.shape[0] for b in blocks))
            blocks.append(anchors)
        self.anchors = np.vstack(blocks)
        self.anchors.setflags(write=False)
        self._starts = np.array(starts, dtype=np.intp)

    @classmethod
    def from_dict(cls, data: dict) -> "Gallery":
        try:
            parsed = GalleryFile(**data)
        except ValidationError as e:
            raise ConfigError(f"invalid gallery: {e}") from e
        entries = {}
        for pid, anchors in parsed.participants.items():
            bad = [i for i, a in enumerate(anchors) if len(a) != parsed.dimension]
            if bad:
                raise ConfigError(
                    f"participant {pid!r} anchors {bad} do not have dimension {parsed.dimension}"
                )
            entries[pid] = np.asarray(anchors, dtype=np.float64).reshape(-1, parsed.dimension)
        return cls(entries, threshold=parsed.threshold)

    @classmethod
    def from_file(cls, path: Path) -> "Gallery":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"gallery file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"gallery file {path} is not valid JSON: {e}") from e
        gallery = cls.from_dict(data)
        logger.info(
            f"[ReIDService] loaded gallery: {len(gallery.participant_ids)} participants, "
            f"{gallery.anchors.shape[0]} anchors, dimension {gallery.dimension}"
        )
        return gallery

    def to_dict(self) -> dict:
        participants = {}
        for i, pid in enumerate(self.participant_ids):
            end = self._starts[i + 1] if i + 1 < len(self._starts) else self.anchors.shape[0]
            participants[pid] = self.anchors[self._starts[i]:end].tolist()
        return {"dimension": self.dimension, "threshold": self.threshold, "participants": participants}

    def participant_scores(self, unit_query: np.ndarray) -> np.ndarray:
        """Best anchor similarity per participant, in participant_ids order."""
        sims = self.anchors @ unit_query
        return np.maximum.reduceat(sims, self._starts)


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def match_identity(
    query: Sequence[float], gallery: Gallery, threshold: Optional[float] = None
) -> Tuple[str, float]:
    """
    Top-1 match over every anchor of every participant.

    Ties between participants go to the lexicographically smallest id.
    """
    if gallery is None or not gallery.participant_ids:
        raise ConfigError("cannot match against an empty gallery")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (gallery.dimension,):
        raise DataError(f"query has shape {q.shape}, gallery dimension is {gallery.dimension}")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise UndefinedSimilarityError("query embedding is the zero vector")
    per_participant = gallery.participant_scores(q / norm)
    best = int(np.argmax(per_participant))  # first maximum = smallest id
    score = float(np.clip(per_participant[best], -1.0, 1.0))
    cutoff = gallery.threshold if threshold is None else threshold
    if score >= cutoff:
        return gallery.participant_ids[best], score
    return UNIDENTIFIED, score


@dataclass
class ReIDTracklet:
    tracklet: Tracklet
    identity: str = UNIDENTIFIED
    match_score: Optional[float] = None
    overridden: bool = False

    @property
    def tracklet_id(self) -> int:
        return self.tracklet.tracklet_id

    @property
    def identified(self) -> bool:
        return self.identity != UNIDENTIFIED


class ReIDService:
    def __init__(
        self,
        gallery: Gallery,
        threshold: Optional[float] = None,
        window: int = 10,
        strategy: str = "earliest",
    ):
        if strategy not in ("earliest", "mean"):
            raise ConfigError(f"unknown re-identification strategy {strategy!r}")
        self.gallery = gallery
        self.threshold = gallery.threshold if threshold is None else float(threshold)
        self.window = window
        self.strategy = strategy

    def _query_embedding(self, t: Tracklet) -> Optional[np.ndarray]:
        embeddings = [d.embedding for d in t.detections[: self.window] if d.embedding is not None]
        if not embeddings:
            return None
        if self.strategy == "earliest":
            return np.asarray(embeddings[0], dtype=np.float64)
        unit = [np.asarray(e, dtype=np.float64) / np.linalg.norm(e) for e in embeddings if np.any(e)]
        if not unit:
            return None
        mean = np.mean(unit, axis=0)
        return mean if np.any(mean) else None

    def resolve_tracklet(self, t: Tracklet) -> ReIDTracklet:
        if not t.detections:
            raise DataError(f"tracklet {t.tracklet_id} has no detections")
        query = self._query_embedding(t)
        if query is None:
            return ReIDTracklet(tracklet=t)
        try:
            identity, score = match_identity(query, self.gallery, self.threshold)
        except UndefinedSimilarityError:
            logger.warning(f"[ReIDService] tracklet {t.tracklet_id} has a zero embedding")
            return ReIDTracklet(tracklet=t)
        return ReIDTracklet(tracklet=t, identity=identity, match_score=score)

    def apply_overrides(
        self, resolved: List[ReIDTracklet], overrides: Dict[int, str]
    ) -> List[dict]:
        """Manual identity corrections, keyed by tracklet id."""
        known = set(self.gallery.participant_ids) | {UNIDENTIFIED}
        by_id = {r.tracklet_id: r for r in resolved}
        applied = []
        for tracklet_id in sorted(overrides):
            identity = overrides[tracklet_id]
            if identity not in known:
                raise ConfigError(f"override for tracklet {tracklet_id} names unknown participant {identity!r}")
            r = by_id.get(tracklet_id)
            if r is None:
                logger.warning(f"[ReIDService] override for unknown tracklet {tracklet_id} ignored")
                continue
            applied.append({"tracklet_id": tracklet_id, "from": r.identity, "to": identity})
            r.identity = identity
            r.overridden = True
        return applied

    def resolve_conflicts(self, resolved: List[ReIDTracklet]) -> List[dict]:
        """
        Two tracklets overlapping in time cannot be the same person: the
        lower-scoring one is demoted to UNIDENTIFIED. Overridden tracklets win.
        """
        def rank(r: ReIDTracklet):
            score = r.match_score if r.match_score is not None else -np.inf
            return (not r.overridden, -score, r.tracklet_id)

        accepted: Dict[str, List[ReIDTracklet]] = {}
        conflicts = []
        for r in sorted((r for r in resolved if r.identified), key=rank):
            span = (r.tracklet.first_seen, r.tracklet.last_seen)
            clash = next(
                (
                    other
                    for other in accepted.get(r.identity, [])
                    if span[0] <= other.tracklet.last_seen and other.tracklet.first_seen <= span[1]
                ),
                None,
            )
            if clash is None:
                accepted.setdefault(r.identity, []).append(r)
                continue
            conflicts.append({
                "reason": "identity_conflict",
                "identity": r.identity,
                "kept_tracklet": clash.tracklet_id,
                "demoted_tracklet": r.tracklet_id,
                "demoted_score": r.match_score,
            })
            logger.warning(
                f"[ReIDService] tracklets {clash.tracklet_id} and {r.tracklet_id} both resolve to "
                f"{r.identity}; demoting {r.tracklet_id}"
            )
            r.identity = UNIDENTIFIED
        conflicts.sort(key=lambda c: c["demoted_tracklet"])
        return conflicts

    def resolve_all(
        self, tracklets: Iterable[Tracklet], overrides: Optional[Dict[int, str]] = None
    ) -> Tuple[List[ReIDTracklet], dict]:
        resolved = [self.resolve_tracklet(t) for t in tracklets]
        applied = self.apply_overrides(resolved, overrides or {})
        conflicts = self.resolve_conflicts(resolved)
        identified = sum(1 for r in resolved if r.identified)
        logger.info(f"[ReIDService] {identified}/{len(resolved)} tracklets identified")
        return resolved, {"identity_conflicts": conflicts, "overrides_applied": applied}


def load_overrides(path: Optional[Path]) -> Dict[int, str]:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return {int(k): str(v) for k, v in data.items()}
    except FileNotFoundError as e:
        raise ConfigError(f"overrides file not found: {path}") from e
    except (json.JSONDecodeError, AttributeError, ValueError) as e:
        raise ConfigError(f"overrides file {path} must map tracklet ids to identities: {e}") from e

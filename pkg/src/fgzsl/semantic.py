"""Class text to key semantic centroids.

Per-class descriptions are reduced to short phrases, each phrase is
embedded as the mean of its word vectors, all training-class phrase
vectors are clustered into K centroids, and every class's phrases are
then partitioned by their nearest centroid (cosine distance). The pooled
partition vectors become the per-channel node states of the class graph.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError, OovError
from .tensor import as_f64, cosine_distance

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9']+")

# Small English stopword list; enough for desk-scale descriptions.
DEFAULT_STOPWORDS = frozenset(
    """a an and are as at be but by for from has have in is it its of on or
    that the this to was were which with""".split()
)


@dataclass
class WordVectorTable:
    """Token -> vector map with a single shared dimension."""

    dim: int
    vectors: dict[str, np.ndarray]
    duplicates: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, token: str) -> np.ndarray | None:
        return self.vectors.get(token)

    def __getitem__(self, token: str) -> np.ndarray:
        try:
            return self.vectors[token]
        except KeyError:
            raise OovError(f"token {token!r} not in word-vector table") from None


@dataclass
class PhraseEmbedding:
    phrase: str
    class_id: int
    vector: np.ndarray


@dataclass
class SemanticCentroids:
    """K cluster centers over phrase vectors plus the fitted assignment."""

    k: int
    centroids: np.ndarray  # (K, d_c)
    assignment: np.ndarray  # point index -> cluster index
    seed: int
    inertia: float


@dataclass
class PhrasePartition:
    """Per class: K disjoint phrase sets and their mean vectors.

    `phrase_sets[cid][k]` lists the class's phrases routed to channel k;
    `h0[cid]` is the (K, d_c) stack of pooled vectors, falling back to the
    class text embedding where a channel received no phrases.
    """

    k: int
    dim: int
    phrase_sets: dict[int, list[list[str]]] = field(default_factory=dict)
    h0: dict[int, np.ndarray] = field(default_factory=dict)


def load_word_vectors(path) -> WordVectorTable:
    """Parse a text file of `token v1 v2 ... vd` lines.

    Duplicate tokens keep the last occurrence and are counted; ragged
    dimensions or an empty file raise FormatError naming the line.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0].lower(), parts[1:]
            if dim is None:
                if not values:
                    raise FormatError(f"{path}:{lineno}: no vector values")
                dim = len(values)
            elif len(values) != dim:
                raise FormatError(
                    f"{path}:{lineno}: dimension {len(values)} != expected {dim}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if token in vectors:
                duplicates += 1
            vectors[token] = vec
    if dim is None:
        raise FormatError(f"{path}: empty word-vector file")
    if duplicates:
        log.warning("%s: %d duplicate tokens, last occurrence kept", path, duplicates)
    return WordVectorTable(dim=dim, vectors=vectors, duplicates=duplicates)


def extract_phrases(description: str, stopwords=DEFAULT_STOPWORDS) -> list[str]:
    """Lowercase unigrams plus adjacent bigrams, stopwords removed.

    Adjacency is taken after stopword removal, order follows first
    occurrence, and duplicates are dropped.
    """
    tokens = [t for t in _TOKEN_RE.findall(description.lower()) if t not in stopwords]
    seen: dict[str, None] = {}
    for tok in tokens:
        seen.setdefault(tok)
    for a, b in zip(tokens, tokens[1:]):
        seen.setdefault(f"{a} {b}")
    return list(seen)


def embed_phrase(phrase: str, table: WordVectorTable, class_id: int = -1) -> PhraseEmbedding:
    """Mean of the phrase's in-vocabulary token vectors.

    Raises OovError when every token is out of vocabulary; the caller is
    expected to drop such phrases rather than zero-fill them.
    """
    if not phrase.strip():
        raise DomainError("empty phrase")
    hits = [table.get(tok) for tok in phrase.lower().split()]
    hits = [v for v in hits if v is not None]
    if not hits:
        raise OovError(f"phrase {phrase!r}: every token out of vocabulary")
    return PhraseEmbedding(
        phrase=phrase, class_id=class_id, vector=np.mean(hits, axis=0)
    )


def embed_class_phrases(
    phrases_by_class: dict[int, list[str]], table: WordVectorTable
) -> dict[int, list[PhraseEmbedding]]:
    """Embed every class's phrases, silently dropping all-OOV ones.

    A class whose phrases are all out of vocabulary raises DomainError:
    it would have no text signal at all downstream.
    """
    out: dict[int, list[PhraseEmbedding]] = {}
    for cid, phrases in phrases_by_class.items():
        embedded = []
        for p in phrases:
            try:
                embedded.append(embed_phrase(p, table, class_id=cid))
            except OovError:
                continue
        if not embedded:
            raise DomainError(f"class {cid}: no in-vocabulary phrases")
        out[cid] = embedded
    return out


def _kmeans_pp_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initial centers: squared-distance-weighted sampling."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on already-chosen coordinates; pick uniformly
            centers[j] = points[rng.integers(n)]
            continue
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iters: int, tol: float):
    """Lloyd iterations from given centers; returns (centers, labels, inertia).

    Empty clusters are reseeded to the point farthest from its assigned
    center, which never increases the assignment objective.
    """
    k = centers.shape[0]
    for _ in range(max_iters):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        assigned_d2 = d2[np.arange(len(points)), labels].copy()
        new_centers = centers.copy()
        for j in range(k):
            members = points[labels == j]
            if members.shape[0] > 0:
                new_centers[j] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(assigned_d2))
                new_centers[j] = points[farthest]
                assigned_d2[farthest] = -1.0  # next empty cluster picks elsewhere
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return centers, labels, inertia


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    tol: float = 1e-6,
    restarts: int = 1,
) -> SemanticCentroids:
    """Lloyd's algorithm with k-means++ seeding, deterministic given `seed`.

    With `restarts` > 1, the run with the lowest objective wins; restart
    r uses seed + r so results stay reproducible.
    """
    pts = np.atleast_2d(as_f64(points))
    n_distinct = len(np.unique(pts, axis=0))
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if n_distinct < k:
        raise DomainError(f"need at least {k} distinct points, got {n_distinct}")
    if restarts < 1:
        raise DomainError(f"restarts must be >= 1, got {restarts}")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        centers = _kmeans_pp_seed(pts, k, rng)
        centers, labels, inertia = _lloyd(pts, centers, max_iters, tol)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia)
    centers, labels, inertia = best
    return SemanticCentroids(
        k=k, centroids=centers, assignment=labels, seed=seed, inertia=inertia
    )


def lloyd_objective_curve(points, k: int, seed: int = 0, max_iters: int = 300) -> list[float]:
    """Assignment objective after each Lloyd iteration (monotonicity probe)."""
    pts = np.atleast_2d(as_f64(points))
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_seed(pts, k, rng)
    curve = []
    for _ in range(max_iters):
        d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        curve.append(float(d2[np.arange(len(pts)), labels].sum()))
        new_centers = centers.copy()
        for j in range(k):
            members = pts[labels == j]
            if members.shape[0] > 0:
                new_centers[j] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(d2[np.arange(len(pts)), labels]))
                new_centers[j] = pts[farthest]
        if np.max(np.linalg.norm(new_centers - centers, axis=1)) < 1e-12:
            break
        centers = new_centers
    return curve


def class_text_embedding(class_phrases: list[PhraseEmbedding]) -> np.ndarray:
    """Mean over all of a class's phrase vectors."""
    if not class_phrases:
        raise DomainError("class has no phrases")
    return np.mean([p.vector for p in class_phrases], axis=0)


def partition_phrases(
    phrases_by_class: dict[int, list[PhraseEmbedding]],
    centroids: SemanticCentroids,
) -> PhrasePartition:
    """Route each class's phrases to their nearest centroid by cosine distance.

    Ties break toward the lowest channel. A channel with no phrases falls
    back to the class text embedding (mean over all phrases) with a
    logged warning, so every node state stays defined.
    """
    k, dim = centroids.k, centroids.centroids.shape[1]
    part = PhrasePartition(k=k, dim=dim)
    for cid, plist in phrases_by_class.items():
        if not plist:
            raise DomainError(f"class {cid} has zero phrases")
        sets: list[list[str]] = [[] for _ in range(k)]
        sums = np.zeros((k, dim), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for pe in plist:
            dists = [cosine_distance(pe.vector, centroids.centroids[j]) for j in range(k)]
            j = int(np.argmin(dists))
            sets[j].append(pe.phrase)
            sums[j] += pe.vector
            counts[j] += 1
        h0 = np.empty((k, dim), dtype=np.float64)
        fallback = class_text_embedding(plist)
        for j in range(k):
            if counts[j] > 0:
                h0[j] = sums[j] / counts[j]
            else:
                h0[j] = fallback
                log.warning("class %s: channel %d empty, using class mean", cid, j)
        part.phrase_sets[cid] = sets
        part.h0[cid] = h0
    return part


def calibration_targets(class_embedding, centroids: SemanticCentroids) -> np.ndarray:
    """Cosine distance from the class embedding to each centroid, in [0, 2]."""
    emb = as_f64(class_embedding)
    return np.array(
        [cosine_distance(emb, centroids.centroids[j]) for j in range(centroids.k)],
        dtype=np.float64,
    )

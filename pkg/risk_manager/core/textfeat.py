"""Description features: bag-of-words TF-IDF and imported embeddings."""

from __future__ import annotations

import csv
import logging
import math
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from functools import cache, partial
from importlib import resources
from types import MappingProxyType
from typing import IO

import numpy as np
from scipy import sparse
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.preprocessing import normalize

from risk_manager.core.errors import FeedFormatError, ParameterError

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"\d+(?:\.\d+)+|[a-z0-9]+")


@cache
def stopwords() -> frozenset[str]:
    text = resources.files("risk_manager.resources").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(word.strip() for word in text.splitlines() if word.strip())


@cache
def _stemmer():
    from nltk.stem import PorterStemmer

    return PorterStemmer()


def tokenize(description: str, stem: bool = False) -> list[str]:
    """Lowercase word and version tokens, minus short tokens, stop words and bare numbers."""
    words = stopwords()
    tokens = [
        token
        for token in _TOKEN.findall(description.lower())
        if len(token) >= 2 and token not in words and not token.isdigit()
    ]
    if stem:
        stemmer = _stemmer()
        tokens = [stemmer.stem(token) for token in tokens]
    return tokens


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    @classmethod
    def normalized(cls, values) -> FeatureVector:
        array = np.asarray(values, dtype=float)
        norm = np.linalg.norm(array)
        return cls(array / norm if norm > 0 else array)

    def __eq__(self, other):
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    document_frequency: dict[str, int] = field(hash=False)
    corpus_size: int
    min_df: int
    stem: bool = False

    @property
    def index(self) -> Mapping[str, int]:
        return MappingProxyType({term: i for i, term in enumerate(self.terms)})

    def __len__(self) -> int:
        return len(self.terms)

    def idf(self) -> np.ndarray:
        df = np.array([self.document_frequency[t] for t in self.terms], dtype=float)
        return np.log((1.0 + self.corpus_size) / (1.0 + df)) + 1.0


def _vectorizer(stem: bool, **kwargs) -> CountVectorizer:
    return CountVectorizer(
        tokenizer=partial(tokenize, stem=stem),
        lowercase=False,
        token_pattern=None,
        **kwargs,
    )


def build_vocabulary(descriptions: Sequence[str], min_df: int = 1, stem: bool = False) -> Vocabulary:
    """Vocabulary over the descriptions; columns in lexicographic term order."""
    if min_df < 1:
        raise ParameterError(f"min_df must be >= 1, got {min_df}")
    if not descriptions:
        raise ParameterError("cannot build a vocabulary from an empty corpus")

    vectorizer = _vectorizer(stem, min_df=min_df, binary=True)
    try:
        presence = vectorizer.fit_transform(descriptions)
    except ValueError:
        # every token was filtered or fell under min_df
        logger.warning("No term reaches min_df=%d in %d descriptions", min_df, len(descriptions))
        return Vocabulary((), {}, len(descriptions), min_df, stem)

    terms = tuple(vectorizer.get_feature_names_out().tolist())
    counts = np.asarray(presence.sum(axis=0)).ravel()
    frequency = {term: int(counts[i]) for i, term in enumerate(terms)}
    return Vocabulary(terms, frequency, len(descriptions), min_df, stem)


def tfidf_matrix(descriptions: Sequence[str], vocab: Vocabulary) -> sparse.csr_matrix:
    """Row i is the L2-normalized TF-IDF vector of descriptions[i]."""
    if not vocab.terms:
        return sparse.csr_matrix((len(descriptions), 0), dtype=float)
    counts = _vectorizer(vocab.stem, vocabulary=dict(vocab.index)).transform(descriptions)
    weights = counts.astype(float).tocsr()
    weights.data = 1.0 + np.log(weights.data)
    weights = weights @ sparse.diags(vocab.idf())
    return normalize(weights.tocsr(), norm="l2")


def vectorize_tfidf(description: str, vocab: Vocabulary) -> FeatureVector:
    row = tfidf_matrix([description], vocab)
    return FeatureVector(np.asarray(row.toarray()).ravel())


def load_embeddings(stream: IO) -> dict[str, FeatureVector]:
    """Read ``id,v0,...,v{d-1}`` rows; vectors are L2-normalized on load."""
    data = stream.read()
    if isinstance(data, bytes):
        data = data.decode("utf-8")

    vectors: dict[str, FeatureVector] = {}
    dimension: int | None = None
    for line_no, row in enumerate(csv.reader(data.splitlines()), start=1):
        if not row:
            continue
        if line_no == 1 and row[0].strip() == "id":
            continue
        cve_id, cells = row[0].strip(), row[1:]
        if not cells:
            raise FeedFormatError(f"{cve_id}: no vector values", line=line_no)
        if dimension is None:
            dimension = len(cells)
        elif len(cells) != dimension:
            raise FeedFormatError(f"{cve_id}: expected {dimension} values, got {len(cells)}", line=line_no)
        try:
            values = [float(cell) for cell in cells]
        except ValueError as exc:
            raise FeedFormatError(f"{cve_id}: non-numeric value", line=line_no) from exc
        if not all(math.isfinite(v) for v in values):
            raise FeedFormatError(f"{cve_id}: non-finite value", line=line_no)
        if cve_id in vectors:
            raise FeedFormatError(f"duplicate embedding for {cve_id}", line=line_no)
        vectors[cve_id] = FeatureVector.normalized(values)
    return vectors


def dump_embeddings(mapping: Mapping[str, FeatureVector], stream: IO[str]) -> None:
    if not mapping:
        return
    dimension = next(iter(mapping.values())).dimension
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["id"] + [f"v{i}" for i in range(dimension)])
    for cve_id in sorted(mapping):
        writer.writerow([cve_id] + [repr(float(v)) for v in mapping[cve_id].values])


def cosine_distance(a: FeatureVector, b: FeatureVector) -> float:
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} != {b.dimension}")
    norm_a, norm_b = a.norm, b.norm
    if norm_a == 0.0 or norm_b == 0.0:
        return 1.0
    similarity = float(np.dot(a.values, b.values)) / (norm_a * norm_b)
    return min(max(1.0 - similarity, 0.0), 2.0)


def cosine_distance_matrix(matrix) -> np.ndarray:
    """Dense pairwise cosine distances; zero rows sit at distance 1 from every other row."""
    rows = matrix.toarray() if sparse.issparse(matrix) else np.asarray(matrix, dtype=float)
    rows = np.asarray(rows, dtype=float)
    zero = np.linalg.norm(rows, axis=1) == 0.0
    unit = normalize(rows, norm="l2") if rows.size else rows
    distances = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    distances[zero, :] = 1.0
    distances[:, zero] = 1.0
    np.fill_diagonal(distances, 0.0)
    return distances


def stack(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        return np.zeros((0, 0))
    dimensions = {v.dimension for v in vectors}
    if len(dimensions) != 1:
        raise ValueError(f"vectors have mixed dimensions {sorted(dimensions)}")
    return np.vstack([v.values for v in vectors])

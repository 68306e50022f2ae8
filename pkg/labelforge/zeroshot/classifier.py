"""
Zero-shot classification of feature tokens by cosine matching against prompt embeddings
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging

import faiss
import numpy as np

from labelforge.core.types import LidarSegment, PanopticLabeling
from labelforge.errors import DataError, VocabularyError
from labelforge.zeroshot.vocabulary import Vocabulary

logger = logging.getLogger(__name__)

DISPLAY_TEMPERATURE = 0.01


@dataclass(frozen=True, eq=False)
class ClassScores:
    """Per-class cosine scores (class ids ascending) and the winning class."""

    class_ids: np.ndarray = field(repr=False)
    scores: np.ndarray = field(repr=False)

    @property
    def best_class_id(self) -> int:
        # argmax returns the first maximum, i.e. the lowest class id
        return int(self.class_ids[int(np.argmax(self.scores))])

    @property
    def best_score(self) -> float:
        return float(np.max(self.scores))

    def probabilities(self, temperature: float = DISPLAY_TEMPERATURE) -> np.ndarray:
        """Softmax over class scores; for reporting only."""
        if temperature <= 0:
            raise ValueError(f"Temperature must be positive, got {temperature}")
        logits = (self.scores - self.scores.max()) / temperature
        weights = np.exp(logits)
        return weights / weights.sum()


def _class_positions(vocab: Vocabulary) -> Tuple[np.ndarray, np.ndarray]:
    class_ids = np.array(vocab.class_ids, dtype=np.int64)
    return class_ids, np.searchsorted(class_ids, vocab.prompt_class_ids)


def _reduce_to_classes(prompt_scores: np.ndarray, vocab: Vocabulary) -> Tuple[np.ndarray, np.ndarray]:
    """Max over each class's prompts; prompt_scores is (tokens, prompts)."""
    class_ids, positions = _class_positions(vocab)
    scores = np.full((prompt_scores.shape[0], class_ids.size), -np.inf)
    for prompt, position in enumerate(positions):
        np.maximum(scores[:, position], prompt_scores[:, prompt], out=scores[:, position])
    return class_ids, scores


def _unit_token(token: np.ndarray, dim: int) -> np.ndarray:
    token = np.asarray(token, dtype=np.float64).reshape(-1)
    if token.size != dim:
        raise VocabularyError(f"Token has dimension {token.size}, prompt embeddings have {dim}")
    norm = np.linalg.norm(token)
    if not norm > 0 or not np.isfinite(norm):
        raise DataError("Cannot classify a token with zero or non-finite norm")
    return token / norm


def classify_token(token: np.ndarray, vocab: Vocabulary) -> ClassScores:
    """Per-class score = best cosine over that class's prompt embeddings."""
    unit = _unit_token(token, vocab.dim)
    class_ids, scores = _reduce_to_classes((vocab.embeddings @ unit)[None, :], vocab)
    return ClassScores(class_ids, scores[0])


class PromptIndex:
    """
    Inner-product index over unit prompt embeddings, for classifying many
    tokens at once. Scores are computed in float32.
    """

    def __init__(self, vocab: Vocabulary):
        """
        Build the index

        Args:
            vocab: Vocabulary with loaded prompt embeddings
        """
        self.vocab = vocab
        self.index = faiss.IndexFlatIP(vocab.dim)
        self.index.add(np.ascontiguousarray(vocab.embeddings, dtype=np.float32))
        logger.debug(f"Built prompt index with {self.index.ntotal} embeddings of dim {vocab.dim}")

    def prompt_scores(self, tokens: np.ndarray) -> np.ndarray:
        """(tokens, prompts) cosine matrix in manifest prompt order."""
        units = np.stack([_unit_token(t, self.vocab.dim) for t in tokens]).astype(np.float32)
        total = self.index.ntotal
        similarities, order = self.index.search(np.ascontiguousarray(units), total)
        scores = np.empty((units.shape[0], total), dtype=np.float64)
        np.put_along_axis(scores, order.astype(np.int64), similarities.astype(np.float64), axis=1)
        return scores

    def classify(self, tokens: np.ndarray) -> List[ClassScores]:
        if len(tokens) == 0:
            return []
        class_ids, scores = _reduce_to_classes(self.prompt_scores(tokens), self.vocab)
        return [ClassScores(class_ids, row) for row in scores]


def classify_segments(
    segments: Sequence[LidarSegment],
    vocab: Vocabulary,
    num_points: int,
    index: Optional[PromptIndex] = None,
) -> Tuple[PanopticLabeling, List[ClassScores]]:
    """
    Label every non-empty segment with its best class.

    Instance ids follow segment order (1..K over non-empty segments), as
    PanopticLabeling.from_segments assigns them.
    """
    labeled = [segment for segment in segments if len(segment)]
    index = index or PromptIndex(vocab)
    scores = index.classify(np.stack([s.token for s in labeled])) if labeled else []
    semantic_ids = [score.best_class_id for score in scores]
    labeling = PanopticLabeling.from_segments(labeled, num_points, semantic_ids)
    logger.debug(f"Classified {len(labeled)} segments with vocabulary {vocab.spec.name!r}")
    return labeling, scores


def prompt_query(
    segments: Sequence[LidarSegment],
    query_embedding: Optional[np.ndarray],
    other_embedding: Optional[np.ndarray],
) -> List[LidarSegment]:
    """Segments whose token is strictly closer to the query than to the background prompt."""
    if query_embedding is None or other_embedding is None:
        raise VocabularyError("Both the query and the background prompt embedding are required")
    query = np.asarray(query_embedding, dtype=np.float64).reshape(-1)
    other = np.asarray(other_embedding, dtype=np.float64).reshape(-1)
    if query.shape != other.shape:
        raise VocabularyError("Query and background embeddings differ in dimension")
    query = query / np.linalg.norm(query)
    other = other / np.linalg.norm(other)

    selected = []
    for segment in segments:
        unit = _unit_token(segment.token, query.size)
        if unit @ query > unit @ other:
            selected.append(segment)
    logger.debug(f"Query selected {len(selected)} of {len(segments)} segments")
    return selected

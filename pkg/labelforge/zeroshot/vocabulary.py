"""
Class vocabularies, prompt manifests and externally computed prompt embeddings.

A vocabulary lists classes with their prompt synonyms and is wrapped into
sentence templates. The instantiated sentences (the manifest) are embedded by
an external text encoder; the resulting float32 rows are loaded back here and
reduced to one unit vector per (class, prompt).
"""

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from labelforge.core.types import MAX_ID, PanopticLabeling
from labelforge.errors import VocabularyError

logger = logging.getLogger(__name__)

PLACEHOLDER = "{}"
BACKGROUND_PROMPT = "other"
UNIT_NORM_TOLERANCE = 1e-6
DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a photo of the {}",
    "a blurry photo of a {}",
    "a photo of a large {}",
    "a photo of a small {}",
    "there is a {} in the scene",
)


class ClassEntry(BaseModel):
    """One vocabulary class and the prompt synonyms it is matched by."""

    class_id: int = Field(..., ge=1, le=MAX_ID)
    name: str = Field(..., min_length=1)
    prompts: List[str] = Field(..., min_length=1)
    is_thing: bool = False
    super_class_id: Optional[int] = Field(default=None, ge=1, le=MAX_ID)


class VocabularySpec(BaseModel):
    """Class/prompt definitions of a vocabulary, without embeddings."""

    name: str = "custom"
    classes: List[ClassEntry] = Field(..., min_length=1)
    templates: List[str] = Field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    super_vocabulary: Optional[str] = None

    @model_validator(mode="after")
    def _unique_class_ids(self):
        ids = [entry.class_id for entry in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Vocabulary {self.name!r} repeats class ids")
        return self

    @property
    def class_ids(self) -> List[int]:
        return sorted(entry.class_id for entry in self.classes)

    @property
    def thing_ids(self) -> List[int]:
        return sorted(entry.class_id for entry in self.classes if entry.is_thing)

    def entry(self, class_id: int) -> ClassEntry:
        for candidate in self.classes:
            if candidate.class_id == class_id:
                return candidate
        raise VocabularyError(f"Class id {class_id} is not part of vocabulary {self.name!r}")

    def is_thing(self, class_id: int) -> bool:
        return self.entry(class_id).is_thing

    def names(self) -> Dict[int, str]:
        return {entry.class_id: entry.name for entry in self.classes}


def _instantiate(prompt: str, templates: Sequence[str]) -> List[str]:
    if not templates:
        raise VocabularyError("At least one sentence template is required")
    sentences = []
    for template in templates:
        if template.count(PLACEHOLDER) != 1:
            raise VocabularyError(f"Template {template!r} must contain exactly one {PLACEHOLDER} placeholder")
        sentences.append(template.replace(PLACEHOLDER, prompt))
    return sentences


def build_prompt_manifest(spec: VocabularySpec) -> List[str]:
    """Every (class, prompt, template) sentence, in that nesting order."""
    manifest = []
    for entry in spec.classes:
        for prompt in entry.prompts:
            manifest.extend(_instantiate(prompt, spec.templates))
    return manifest


def build_query_manifest(query: str, templates: Sequence[str] = DEFAULT_TEMPLATES) -> List[str]:
    """Sentences for a free-text query followed by those of the background prompt."""
    if not query.strip():
        raise VocabularyError("Query text must not be empty")
    return _instantiate(query, templates) + _instantiate(BACKGROUND_PROMPT, templates)


def write_prompt_manifest(manifest: Sequence[str], path: Union[str, Path]) -> None:
    for line in manifest:
        if "\n" in line:
            raise VocabularyError(f"Manifest line {line!r} contains a newline")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{line}\n" for line in manifest), encoding="utf-8")


def read_prompt_manifest(path: Union[str, Path]) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _mean_of_groups(rows: np.ndarray, group_size: int) -> np.ndarray:
    """Renormalized mean over consecutive blocks of `group_size` rows."""
    grouped = rows.reshape(-1, group_size, rows.shape[1]).mean(axis=1)
    norms = np.linalg.norm(grouped, axis=1)
    if np.any(norms == 0):
        raise VocabularyError("A prompt's template embeddings average to the zero vector")
    return grouped / norms[:, None]


def _check_rows(rows: np.ndarray, expected: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise VocabularyError(f"Embedding blob must be 2-D, got shape {rows.shape}")
    if rows.shape[0] != expected:
        raise VocabularyError(f"Embedding blob has {rows.shape[0]} rows, the manifest has {expected} lines")
    if not np.all(np.isfinite(rows)):
        raise VocabularyError("Embedding blob contains non-finite values")
    return rows


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """A vocabulary spec with one unit embedding per (class, prompt)."""

    spec: VocabularySpec
    embeddings: np.ndarray = field(repr=False)
    prompt_class_ids: np.ndarray = field(repr=False)

    def __post_init__(self):
        embeddings = np.asarray(self.embeddings, dtype=np.float64)
        prompt_class_ids = np.asarray(self.prompt_class_ids, dtype=np.int64)
        expected = sum(len(entry.prompts) for entry in self.spec.classes)
        if embeddings.ndim != 2 or embeddings.shape[0] != expected:
            raise VocabularyError(
                f"Vocabulary {self.spec.name!r} needs {expected} prompt embeddings, got shape {embeddings.shape}"
            )
        if prompt_class_ids.shape != (expected,):
            raise VocabularyError("One class id per prompt embedding is required")
        if np.any(np.abs(np.linalg.norm(embeddings, axis=1) - 1) > UNIT_NORM_TOLERANCE):
            raise VocabularyError("Prompt embeddings must be unit-norm")
        embeddings.setflags(write=False)
        prompt_class_ids.setflags(write=False)
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "prompt_class_ids", prompt_class_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def class_ids(self) -> List[int]:
        return self.spec.class_ids

    @classmethod
    def from_prompt_embeddings(cls, spec: VocabularySpec, embeddings: np.ndarray) -> "Vocabulary":
        class_ids = [entry.class_id for entry in spec.classes for _ in entry.prompts]
        return cls(spec, embeddings, np.array(class_ids, dtype=np.int64))


def load_prompt_embeddings(
    spec: VocabularySpec,
    rows: np.ndarray,
    manifest: Optional[Sequence[str]] = None,
) -> Vocabulary:
    """
    Attach encoder output to a vocabulary.

    `rows` holds one embedding per manifest line, in manifest order. Each
    (class, prompt) gets the mean of its template rows, renormalized. A
    manifest read back from disk is checked against the one the spec builds.
    """
    expected = build_prompt_manifest(spec)
    if manifest is not None and list(manifest) != expected:
        raise VocabularyError(
            f"Manifest does not match vocabulary {spec.name!r} ({len(manifest)} vs {len(expected)} lines)"
        )
    rows = _check_rows(rows, len(expected))
    vocabulary = Vocabulary.from_prompt_embeddings(spec, _mean_of_groups(rows, len(spec.templates)))
    logger.info(
        f"Loaded vocabulary {spec.name!r}: {len(spec.classes)} classes, "
        f"{vocabulary.embeddings.shape[0]} prompts, dim {vocabulary.dim}"
    )
    return vocabulary


def load_query_embeddings(
    query: str,
    rows: np.ndarray,
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    manifest: Optional[Sequence[str]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(query embedding, background embedding) from the rows of a query manifest."""
    expected = build_query_manifest(query, templates)
    if manifest is not None and list(manifest) != expected:
        raise VocabularyError(f"Manifest does not match query {query!r}")
    rows = _check_rows(rows, len(expected))
    query_embedding, other_embedding = _mean_of_groups(rows, len(templates))
    return query_embedding, other_embedding


def load_vocabulary_spec(name_or_path: Union[str, Path]) -> VocabularySpec:
    """Read a vocabulary JSON file, or a shipped vocabulary by name."""
    path = Path(name_or_path)
    try:
        if path.suffix == ".json" and path.is_file():
            text = path.read_text(encoding="utf-8")
        else:
            shipped = resources.files("labelforge.zeroshot") / "vocabularies" / f"{name_or_path}.json"
            if not shipped.is_file():
                raise VocabularyError(f"Unknown vocabulary {str(name_or_path)!r}")
            text = shipped.read_text(encoding="utf-8")
        return VocabularySpec.model_validate(json.loads(text))
    except (ValidationError, json.JSONDecodeError) as e:
        raise VocabularyError(f"Invalid vocabulary {str(name_or_path)!r}: {e}") from e


def load_super_vocabulary(spec: VocabularySpec) -> VocabularySpec:
    if spec.super_vocabulary is None:
        raise VocabularyError(f"Vocabulary {spec.name!r} names no super-class vocabulary")
    return load_vocabulary_spec(spec.super_vocabulary)


def map_to_super_classes(labeling: PanopticLabeling, spec: VocabularySpec) -> PanopticLabeling:
    """Rewrite semantic ids to their super-class ids; void stays void, instances untouched."""
    lookup = np.zeros(MAX_ID + 1, dtype=np.int64)
    known = np.zeros(MAX_ID + 1, dtype=bool)
    known[0] = True
    for entry in spec.classes:
        known[entry.class_id] = True
        lookup[entry.class_id] = -1 if entry.super_class_id is None else entry.super_class_id

    present = np.unique(labeling.semantic)
    unknown = present[~known[present]]
    if unknown.size:
        raise VocabularyError(f"Semantic ids {unknown.tolist()} are not part of vocabulary {spec.name!r}")
    unmapped = present[lookup[present] < 0]
    if unmapped.size:
        raise VocabularyError(f"Classes {unmapped.tolist()} of vocabulary {spec.name!r} have no super class")
    return PanopticLabeling(lookup[labeling.semantic], labeling.instance)

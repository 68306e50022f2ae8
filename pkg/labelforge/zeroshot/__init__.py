"""
Zero-shot classification of Lidar segments by text prompts
"""

from labelforge.zeroshot.classifier import (
    ClassScores,
    PromptIndex,
    classify_segments,
    classify_token,
    prompt_query,
)
from labelforge.zeroshot.vocabulary import (
    ClassEntry,
    Vocabulary,
    VocabularySpec,
    build_prompt_manifest,
    build_query_manifest,
    load_prompt_embeddings,
    load_query_embeddings,
    load_vocabulary_spec,
    map_to_super_classes,
)

__all__ = [
    "ClassEntry",
    "ClassScores",
    "PromptIndex",
    "Vocabulary",
    "VocabularySpec",
    "build_prompt_manifest",
    "build_query_manifest",
    "classify_segments",
    "classify_token",
    "load_prompt_embeddings",
    "load_query_embeddings",
    "load_vocabulary_spec",
    "map_to_super_classes",
    "prompt_query",
]

"""Selective forgetting for reasoning language models."""

from ._frul import (
    Corpus,
    Example,
    KnowledgeFact,
    RetryableError,
    RuntimeFailure,
    ScrubbedExample,
    Span,
    Split,
    ValidationError,
    Vocabulary,
    build_vocab,
    canonical_config,
    config_hash,
    forget_knowledge_base,
    generate_corpus,
    log1mexp,
    partition,
    read_report,
    rouge_l,
    run_cli,
    scrub,
)

__all__ = [
    "Corpus",
    "Example",
    "KnowledgeFact",
    "RetryableError",
    "RuntimeFailure",
    "ScrubbedExample",
    "Span",
    "Split",
    "ValidationError",
    "Vocabulary",
    "build_vocab",
    "canonical_config",
    "config_hash",
    "forget_knowledge_base",
    "generate_corpus",
    "log1mexp",
    "partition",
    "read_report",
    "rouge_l",
    "run_cli",
    "scrub",
]

"""Input checks shared by the estimators and the command-line harness."""

from __future__ import annotations

from typing import Iterable, Sequence

from .errors import ModelFormatError
from .lm import TabularLM, TokenSeq


def check_model_pair(target: TabularLM, draft: TabularLM | None) -> None:
    if not isinstance(target, TabularLM):
        raise TypeError(f"target must be a TabularLM, got {type(target).__name__}")
    if draft is None:
        return
    if not isinstance(draft, TabularLM):
        raise TypeError(f"draft must be a TabularLM, got {type(draft).__name__}")
    if draft.vocab.size != target.vocab.size:
        raise ModelFormatError(
            f"draft vocab size {draft.vocab.size} != target vocab size {target.vocab.size}")


def check_prefix(prefix, models: Iterable[TabularLM]) -> tuple[int, ...]:
    """Validate token ids and that decoding from ``prefix`` never leaves the tables."""
    toks = tuple(prefix.tokens if isinstance(prefix, TokenSeq) else prefix)
    for lm in models:
        if lm is None:
            continue
        lm.vocab.check_tokens(toks)
        gaps = lm.unreachable_gaps([toks])
        if gaps:
            raise ModelFormatError(
                f"{lm.role} model has no row for context {list(gaps[0])} reachable "
                f"from prefix {list(toks)}")
    return toks


def check_prefixes(prefixes, models: Sequence[TabularLM]) -> list[tuple[int, ...]]:
    if isinstance(prefixes, (str, bytes)):
        raise TypeError("prefixes must be a sequence of token-id sequences")
    out = [check_prefix(p, models) for p in prefixes]
    if not out:
        raise ValueError("no prefixes given")
    return out

from __future__ import annotations

import io
from pathlib import Path

import pytest

from clinspan.corpus import AnnotatedCorpus, AnnotatedSentence, RawToken, parse_corpus

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def stats_corpus() -> AnnotatedCorpus:
    with open(DATA_DIR / "stats_corpus.txt", encoding="utf-8") as fh:
        return parse_corpus(fh)


@pytest.fixture(scope="session")
def overfit_corpus() -> AnnotatedCorpus:
    with open(DATA_DIR / "overfit_corpus.txt", encoding="utf-8") as fh:
        return parse_corpus(fh)


def make_sentence(
    labeled_words: list[tuple[str, str]],
    doc_id: str = "0",
    sent_index: int = 0,
    pos: str = "NOUN",
) -> AnnotatedSentence:
    """Build a sentence from (surface, label) pairs with a uniform POS tag."""
    tokens = tuple(
        RawToken(surface=w, pos=pos, label=lab) for w, lab in labeled_words
    )
    return AnnotatedSentence(tokens=tokens, doc_id=doc_id, sent_index=sent_index)


def make_corpus(sentences: list[AnnotatedSentence]) -> AnnotatedCorpus:
    docs = {s.doc_id for s in sentences}
    return AnnotatedCorpus(tuple(sentences), note_count=len(docs))


def parse_text(text: str, **kwargs) -> AnnotatedCorpus:
    return parse_corpus(io.StringIO(text), **kwargs)

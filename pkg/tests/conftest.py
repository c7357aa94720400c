from __future__ import annotations

import pytest

from textloom.backend import BackendProfile, MockBackend, MockRule
from textloom.corpus import Pairing, UnlabeledRecord
from textloom.synthesis import Provenance, QuintupleRecord
from textloom.taskspec import ResolvedTask, TaskType


@pytest.fixture
def mock_backend():
    def factory(*rules: MockRule, model_name: str = "mock-model") -> MockBackend:
        profile = BackendProfile(kind="mock", model_name=model_name, fixtures=tuple(rules))
        return MockBackend(profile)

    return factory


def make_record(i: int = 0, language: str = "en", text: str | None = None) -> UnlabeledRecord:
    return UnlabeledRecord(
        id=f"rec:{i}",
        source="test",
        language=language,
        text=text or f"Sample passage number {i} about topic {i % 7}.",
    )


def make_pairing(i: int = 0, task: TaskType = TaskType.CLOSED_BOOK_QA, language: str = "en") -> Pairing:
    return Pairing(
        id=f"p{i:06d}",
        record=make_record(i, language=language),
        task=ResolvedTask(base=task),
        seed=i,
    )


def make_quintuple(
    i: int = 0,
    task: TaskType = TaskType.CLOSED_BOOK_QA,
    language: str = "en",
    question: str | None = None,
    score: int | None = None,
    stage: str = "distilled",
) -> QuintupleRecord:
    return QuintupleRecord(
        id=f"q:{i}",
        task=ResolvedTask(base=task),
        language=language,
        unlabeled=f"Passage {i}.",
        question=question or f"Question number {i}?",
        logic=f"1. Step one for {i}. 2. Step two.",
        answer=f"Answer {i}.",
        score=score,
        analysis=None if score is None else f"Analysis {i}.",
        provenance=Provenance(
            model_name="mock-model",
            template_version="1.0.0",
            request_id=f"req:{i}",
            stage=stage,
        ),
    )

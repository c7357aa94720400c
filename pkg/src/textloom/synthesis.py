"""Quintuple generation, logic supplementation, and structured-output parsing."""

from __future__ import annotations

import re
import json
from dataclasses import dataclass, field, replace

from .backend import Backend, map_bounded
from .corpus import LabeledSeed, Pairing
from .errors import (
    ExtractionError,
    GenerationFailed,
    JsonNotFoundError,
    SchemaFieldError,
    ScoreRangeError,
    VerdictError,
)
from .taskspec import ResolvedTask, TemplateKind, TemplateRegistry, default_registry

STAGES = ("distilled", "supplemented", "candidate")

# Total completion attempts allowed per record before it goes to the reject
# log; the value lands in the run manifest.
DEFAULT_RETRY_BUDGET = 2


@dataclass(frozen=True)
class Provenance:
    model_name: str
    template_version: str
    request_id: str
    stage: str


@dataclass(frozen=True)
class QuintupleRecord:
    """One synthesized training record: answer, question, source text, logic, task.

    ``score`` (and the scorer's ``analysis``) are filled later by inspection;
    until then they stay None.
    """

    id: str
    task: ResolvedTask
    language: str
    unlabeled: str
    question: str
    logic: str
    answer: str
    provenance: Provenance
    score: int | None = None
    analysis: str | None = None

    def __post_init__(self):
        if not (self.question and self.logic and self.answer):
            raise ValueError(f"record {self.id!r}: question, logic, and answer must be non-empty")
        if self.score is not None and not 1 <= self.score <= 5:
            raise ValueError(f"record {self.id!r}: score {self.score} outside 1..5")
        if self.provenance.stage not in STAGES:
            raise ValueError(f"record {self.id!r}: unknown stage {self.provenance.stage!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task.base.value,
            "display_name": self.task.display_name,
            "prefix": self.task.prefix,
            "language": self.language,
            "unlabeled": self.unlabeled,
            "question": self.question,
            "logic": self.logic,
            "answer": self.answer,
            "score": self.score,
            "analysis": self.analysis,
            "provenance": {
                "model_name": self.provenance.model_name,
                "template_version": self.provenance.template_version,
                "request_id": self.provenance.request_id,
                "stage": self.provenance.stage,
            },
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "QuintupleRecord":
        from .taskspec import TaskType

        task = ResolvedTask(
            base=TaskType(obj["task"]),
            prefix=obj.get("prefix"),
            display_name=obj.get("display_name", ""),
        )
        prov = obj["provenance"]
        return cls(
            id=obj["id"],
            task=task,
            language=obj["language"],
            unlabeled=obj["unlabeled"],
            question=obj["question"],
            logic=obj["logic"],
            answer=obj["answer"],
            score=obj.get("score"),
            analysis=obj.get("analysis"),
            provenance=Provenance(
                model_name=prov["model_name"],
                template_version=prov["template_version"],
                request_id=prov["request_id"],
                stage=prov["stage"],
            ),
        )


@dataclass
class RejectEntry:
    """A generation that exhausted its retry budget, kept for the reject log."""

    pairing_id: str
    task: str
    language: str
    attempts: list[str] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "pairing_id": self.pairing_id,
            "task": self.task,
            "language": self.language,
            "attempts": self.attempts,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class ParsedGeneration:
    """The (question, thinking_steps, answer) triple read from model output."""

    question: str
    thinking_steps: str
    answer: str

    @classmethod
    def parse(cls, text: str) -> "ParsedGeneration":
        return cls(**extract_structured(text, "generation-triple"))


SCHEMAS = {
    "generation-triple": ("question", "thinking_steps", "answer"),
    "thought-process": ("thought_process",),
    "inspection-pair": ("analysis_steps", "score"),
}

_VERDICT_RE = re.compile(r"^[\s\"'`*\-.:：]*([Yy][Ee][Ss]|[Nn][Oo])\b")


def _json_candidates(text: str):
    """Yield balanced top-level {...} substrings in order of appearance."""
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"' and depth > 0:
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                yield text[start : i + 1]


def _coerce_score(value) -> int:
    if isinstance(value, bool):
        raise ScoreRangeError(f"score {value!r} is not an integer in 1..5")
    if isinstance(value, int):
        score = value
    elif isinstance(value, float) and value.is_integer():
        score = int(value)
    elif isinstance(value, str):
        try:
            score = int(value.strip())
        except ValueError:
            raise ScoreRangeError(f"score {value!r} is not an integer in 1..5") from None
    else:
        raise ScoreRangeError(f"score {value!r} is not an integer in 1..5")
    if not 1 <= score <= 5:
        raise ScoreRangeError(f"score {score} outside 1..5")
    return score


def extract_structured(text: str, schema: str) -> dict:
    """Pull one structured payload out of free-form model text.

    Finds the first balanced JSON object (prose and markdown fences around it
    are fine), checks the schema's required keys, and trims string values.
    The ``yes-no`` schema instead reads a leading Yes/No verdict token.
    """
    if schema == "yes-no":
        match = _VERDICT_RE.match(text or "")
        if not match:
            raise VerdictError(f"no leading yes/no verdict in {text[:80]!r}")
        return {"verdict": match.group(1).lower()}

    if schema not in SCHEMAS:
        raise ValueError(f"unknown schema {schema!r}")
    parsed = None
    for candidate in _json_candidates(text or ""):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            parsed = obj
            break
    if parsed is None:
        raise JsonNotFoundError(f"no JSON object found in {text[:80]!r}")

    out: dict = {}
    for key in SCHEMAS[schema]:
        if key not in parsed:
            raise SchemaFieldError(key)
        value = parsed[key]
        if key == "score":
            out[key] = _coerce_score(value)
            continue
        if isinstance(value, str):
            value = value.strip()
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            value = str(value)
        else:
            raise SchemaFieldError(key, f"key {key!r} is not a usable string")
        if not value:
            raise SchemaFieldError(key, f"key {key!r} is empty")
        out[key] = value
    return out


def _joined_prefix(prefix: str, question: str) -> str:
    if prefix.endswith(tuple(" \n\t：:")):
        return f"{prefix}{question}"
    return f"{prefix} {question}"


def generate_quintuple(
    backend: Backend,
    pairing: Pairing,
    stage: str = "distilled",
    registry: TemplateRegistry | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    prefix_question: bool = True,
) -> QuintupleRecord:
    """Generate (question, logic, answer) for one pairing.

    On a parse failure the prompt is reissued with a fresh request-id suffix,
    up to ``retry_budget`` total attempts; exhaustion raises GenerationFailed
    carrying every raw text for the reject log.
    """
    registry = registry or default_registry()
    task = pairing.task
    language = pairing.record.language
    prompt = registry.render(TemplateKind.GENERATION, task, language, {"u": pairing.record.text})
    template = registry.lookup(TemplateKind.GENERATION, task.base, language)
    tags = {"kind": "generation", "task": task.base.value, "language": language}

    attempts: list[str] = []
    last_error: ExtractionError | None = None
    for attempt in range(max(1, retry_budget)):
        request_id = f"gen:{stage}:{pairing.id}#a{attempt}"
        result = backend.complete(prompt, request_id, tags)
        attempts.append(result.text)
        try:
            parsed = extract_structured(result.text, "generation-triple")
        except ExtractionError as exc:
            last_error = exc
            continue
        question = parsed["question"]
        if task.is_mapped and prefix_question:
            question = _joined_prefix(task.prefix, question)
        return QuintupleRecord(
            id=f"{stage}:{pairing.id}",
            task=task,
            language=language,
            unlabeled=pairing.record.text,
            question=question,
            logic=parsed["thinking_steps"],
            answer=parsed["answer"],
            provenance=Provenance(
                model_name=backend.profile.model_name,
                template_version=template.version,
                request_id=request_id,
                stage=stage,
            ),
        )
    raise GenerationFailed(reason=str(last_error), attempts=attempts)


def supplement_logic(
    backend: Backend,
    seed: LabeledSeed,
    registry: TemplateRegistry | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
) -> QuintupleRecord:
    """Fill in the missing reasoning for a labeled seed.

    The seed's question and answer pass through byte-for-byte; only the logic
    comes from the model.
    """
    registry = registry or default_registry()
    task = ResolvedTask(base=seed.task)
    prompt = registry.render(
        TemplateKind.LOGIC_SUPPLEMENT,
        task,
        seed.language,
        {"u": seed.text, "q": seed.question, "a": seed.answer},
    )
    template = registry.lookup(TemplateKind.LOGIC_SUPPLEMENT, task.base, seed.language)
    tags = {"kind": "logic-supplement", "task": seed.task.value, "language": seed.language}

    attempts: list[str] = []
    last_error: ExtractionError | None = None
    for attempt in range(max(1, retry_budget)):
        request_id = f"logic:{seed.id}#a{attempt}"
        result = backend.complete(prompt, request_id, tags)
        attempts.append(result.text)
        try:
            parsed = extract_structured(result.text, "thought-process")
        except ExtractionError as exc:
            last_error = exc
            continue
        return QuintupleRecord(
            id=f"supplemented:{seed.id}",
            task=task,
            language=seed.language,
            unlabeled=seed.text,
            question=seed.question,
            logic=parsed["thought_process"],
            answer=seed.answer,
            provenance=Provenance(
                model_name=backend.profile.model_name,
                template_version=template.version,
                request_id=request_id,
                stage="supplemented",
            ),
        )
    raise GenerationFailed(reason=str(last_error), attempts=attempts)


def synthesize_pairings(
    backend: Backend,
    pairings: list[Pairing],
    stage: str = "distilled",
    registry: TemplateRegistry | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    parallelism: int = 1,
    prefix_question: bool = True,
) -> tuple[list[QuintupleRecord], list[RejectEntry]]:
    """Run generation over all pairings; failures land in the reject list."""

    def work(pairing: Pairing):
        try:
            return generate_quintuple(
                backend, pairing, stage, registry, retry_budget, prefix_question
            )
        except GenerationFailed as exc:
            return RejectEntry(
                pairing_id=pairing.id,
                task=pairing.task.base.value,
                language=pairing.record.language,
                attempts=exc.attempts,
                reason=exc.reason,
            )

    records: list[QuintupleRecord] = []
    rejects: list[RejectEntry] = []
    for outcome in map_bounded(work, pairings, parallelism):
        if isinstance(outcome, QuintupleRecord):
            records.append(outcome)
        else:
            rejects.append(outcome)
    return records, rejects


def supplement_seeds(
    backend: Backend,
    seeds: list[LabeledSeed],
    registry: TemplateRegistry | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
    parallelism: int = 1,
) -> tuple[list[QuintupleRecord], list[RejectEntry]]:
    """Run logic supplementation over all seeds; failures land in rejects."""

    def work(seed: LabeledSeed):
        try:
            return supplement_logic(backend, seed, registry, retry_budget)
        except GenerationFailed as exc:
            return RejectEntry(
                pairing_id=seed.id,
                task=seed.task.value,
                language=seed.language,
                attempts=exc.attempts,
                reason=exc.reason,
            )

    records: list[QuintupleRecord] = []
    rejects: list[RejectEntry] = []
    for outcome in map_bounded(work, seeds, parallelism):
        if isinstance(outcome, QuintupleRecord):
            records.append(outcome)
        else:
            rejects.append(outcome)
    return records, rejects


def with_score(record: QuintupleRecord, score: int, analysis: str | None = None) -> QuintupleRecord:
    """Copy a record with its inspection score (and the scorer's analysis) set."""
    return replace(record, score=score, analysis=analysis)

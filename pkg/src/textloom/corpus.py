"""Corpus ingestion, deduplication, and randomized (record, task) pairing."""

from __future__ import annotations

import json
import random
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, EmptyCorpusError
from .taskspec import LANGUAGES, ResolvedTask, TaskType, coerce_task

# Labeled seeds are only collected for these four task types.
SEED_TASKS = frozenset(
    {TaskType.EXTRACTIVE_QA, TaskType.NLI, TaskType.MULTI_CHOICE_SINGLE, TaskType.SUMMARIZATION}
)


@dataclass(frozen=True)
class UnlabeledRecord:
    """One unit of raw domain text awaiting synthesis."""

    id: str
    source: str
    language: str
    text: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError(f"record {self.id!r} has empty text")
        if self.language not in LANGUAGES:
            raise ValueError(f"record {self.id!r} has unsupported language {self.language!r}")


@dataclass(frozen=True)
class LabeledSeed:
    """A collected (text, question, answer) example still missing its logic."""

    id: str
    language: str
    text: str
    question: str
    answer: str
    task: TaskType

    def __post_init__(self):
        if self.task not in SEED_TASKS:
            raise ValueError(f"seed {self.id!r}: task {self.task.value!r} is not a collected type")
        if not self.question or not self.answer:
            raise ValueError(f"seed {self.id!r}: question and answer must be non-empty")
        if self.language not in LANGUAGES:
            raise ValueError(f"seed {self.id!r} has unsupported language {self.language!r}")


@dataclass(frozen=True)
class Pairing:
    """A record matched with a task to synthesize, replayable from its seed."""

    id: str
    record: UnlabeledRecord
    task: ResolvedTask
    seed: int


@dataclass(frozen=True)
class SourceDescriptor:
    key: str
    path: str
    format: str = "jsonl"
    language: str = "en"


@dataclass
class IngestReport:
    """Records plus everything that was skipped on the way in."""

    records: list[UnlabeledRecord]
    line_errors: list[dict]
    dropped_blank: int

    def counts(self) -> dict:
        return {
            "records": len(self.records),
            "line_errors": len(self.line_errors),
            "dropped_blank": self.dropped_blank,
        }


def ingest_corpus(source: SourceDescriptor, format: str | None = None) -> IngestReport:
    """Read one source file into records.

    JSONL lines must be objects with a non-empty ``text``; plain-lines files
    contribute one record per non-blank line. Missing ids are assigned as
    ``<source-key>:<ordinal>``. Malformed lines are collected into the report
    and skipped so a long ingest survives isolated bad lines.
    """
    fmt = format or source.format
    if fmt not in ("jsonl", "plain-lines"):
        raise ConfigError(f"unknown corpus format {fmt!r}")
    path = Path(source.path)
    records: list[UnlabeledRecord] = []
    errors: list[dict] = []
    dropped = 0
    seen_ids: set[str] = set()

    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                if fmt == "plain-lines":
                    dropped += 1
                continue
            if fmt == "plain-lines":
                rec = UnlabeledRecord(
                    id=f"{source.key}:{len(records)}",
                    source=source.key,
                    language=source.language,
                    text=line.strip(),
                )
                records.append(rec)
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append({"line": lineno, "error": f"invalid JSON: {exc.msg}"})
                continue
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                errors.append({"line": lineno, "error": "not an object with a string `text` field"})
                continue
            text = obj["text"].strip()
            if not text:
                dropped += 1
                continue
            rec_id = str(obj.get("id") or f"{source.key}:{len(records)}")
            if rec_id in seen_ids:
                errors.append({"line": lineno, "error": f"duplicate id {rec_id!r}"})
                continue
            language = obj.get("language") or source.language
            meta = obj.get("meta") or {}
            try:
                rec = UnlabeledRecord(
                    id=rec_id,
                    source=source.key,
                    language=language,
                    text=text,
                    meta={str(k): str(v) for k, v in meta.items()},
                )
            except ValueError as exc:
                errors.append({"line": lineno, "error": str(exc)})
                continue
            seen_ids.add(rec_id)
            records.append(rec)

    if not records:
        raise EmptyCorpusError(f"source {source.key!r} produced zero valid records")
    return IngestReport(records=records, line_errors=errors, dropped_blank=dropped)


def load_seeds(path: str | Path, default_language: str = "en") -> list[LabeledSeed]:
    """Read labeled seeds from JSONL (id, language, text, question, answer, task)."""
    seeds = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            task = coerce_task(str(obj["task"])).base
            seeds.append(
                LabeledSeed(
                    id=str(obj.get("id") or f"seed:{lineno}"),
                    language=obj.get("language") or default_language,
                    text=str(obj["text"]).strip(),
                    question=str(obj["question"]).strip(),
                    answer=str(obj["answer"]).strip(),
                    task=task,
                )
            )
    return seeds


def _normalize_text(text: str) -> str:
    return " ".join(text.split())


def dedup(records: list[UnlabeledRecord]) -> list[UnlabeledRecord]:
    """Drop exact duplicates by whitespace-normalized text, keeping the first."""
    seen: set[str] = set()
    kept = []
    for rec in records:
        key = _normalize_text(rec.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(rec)
    return kept


def _weight_tables(task_weights: dict) -> dict[str, list[tuple[ResolvedTask, float]]]:
    """Normalize the accepted weight layouts into per-language tables.

    Accepts either ``{task: weight}`` (applies to every language) or
    ``{language: {task: weight}}``.
    """
    per_language: dict[str, dict] = {}
    if task_weights and all(k in LANGUAGES for k in task_weights):
        for lang, table in task_weights.items():
            per_language[lang] = table
    else:
        for lang in LANGUAGES:
            per_language[lang] = task_weights

    tables: dict[str, list[tuple[ResolvedTask, float]]] = {}
    for lang, table in per_language.items():
        entries = []
        for key, weight in table.items():
            weight = float(weight)
            if weight < 0:
                raise ConfigError(f"negative task weight for {key!r}")
            entries.append((coerce_task(key), weight))
        tables[lang] = entries
    return tables


def sample_pairings(
    records: list[UnlabeledRecord],
    task_weights: dict,
    count: int,
    seed: int,
) -> list[Pairing]:
    """Draw ``count`` (record, task) pairings, fully determined by ``seed``.

    Records are drawn uniformly with replacement; tasks by normalized weight
    for the drawn record's language.
    """
    if count < 0:
        raise ConfigError("count must be >= 0")
    if count == 0:
        return []
    if not records:
        raise EmptyCorpusError("cannot sample pairings from an empty record list")

    tables = _weight_tables(task_weights)
    cumulative: dict[str, tuple[list[float], list[ResolvedTask]]] = {}
    for lang, entries in tables.items():
        total = 0.0
        bounds, tasks = [], []
        for task, weight in entries:
            if weight == 0.0:
                continue
            total += weight
            bounds.append(total)
            tasks.append(task)
        if tasks:
            cumulative[lang] = (bounds, tasks)

    rng = random.Random(seed)
    pairings = []
    for i in range(count):
        rec = records[rng.randrange(len(records))]
        if rec.language not in cumulative:
            raise ConfigError(f"no positive task weight configured for language {rec.language!r}")
        bounds, tasks = cumulative[rec.language]
        r = rng.random() * bounds[-1]
        task = tasks[min(bisect_left(bounds, r), len(tasks) - 1)]
        pairings.append(Pairing(id=f"p{i:06d}", record=rec, task=task, seed=rng.getrandbits(32)))
    return pairings

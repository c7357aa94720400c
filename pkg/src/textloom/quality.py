"""Relevance-aware filtering, self-inspection scoring, and the independence audit."""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .backend import Backend, map_bounded
from .errors import ExtractionError, GenerationFailed, PreconditionError
from .synthesis import QuintupleRecord, RejectEntry, extract_structured, with_score
from .taskspec import (
    ASSET_ROOT,
    ResolvedTask,
    TemplateKind,
    TemplateRegistry,
    coerce_task,
    default_registry,
)

DEFAULT_BIAS_THRESHOLD = 0.10

_CJK_RE = re.compile(r"[㐀-鿿豈-﫿]")
_TOKEN_RE = re.compile(r"[a-zA-Z0-9']+|[㐀-鿿豈-﫿]")


def _read_phrase_file(path: Path) -> tuple[str, ...]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return tuple(line.strip() for line in lines if line.strip())


@dataclass(frozen=True)
class ProhibitedLexicon:
    """Per-language phrases whose presence marks a question as text-dependent."""

    phrases: dict

    @classmethod
    def load(cls, root: Path | None = None) -> "ProhibitedLexicon":
        root = Path(root) if root else ASSET_ROOT / "lexicon" / "prohibited"
        phrases = {p.stem: _read_phrase_file(p) for p in sorted(root.glob("*.txt"))}
        return cls(phrases=phrases)

    def all_phrases(self) -> list[str]:
        return [p for plist in self.phrases.values() for p in plist]


def load_stopwords(root: Path | None = None) -> dict:
    root = Path(root) if root else ASSET_ROOT / "lexicon" / "stopwords"
    return {p.stem: frozenset(_read_phrase_file(p)) for p in sorted(root.glob("*.txt"))}


@dataclass(frozen=True)
class Decision:
    keep: bool
    phrase: str | None = None


def _phrase_in(phrase: str, question: str) -> bool:
    # CJK phrases match as literal substrings; alphabetic ones fold case.
    if _CJK_RE.search(phrase):
        return phrase in question
    return phrase.casefold() in question.casefold()


def detect_prohibited(question: str, task, lexicon: ProhibitedLexicon) -> Decision:
    """Reject context-free-task questions that lean on an absent text.

    Open-book and other context-dependent tasks always keep: their questions
    are supposed to reference the source material.
    """
    resolved = coerce_task(task)
    if not resolved.base.context_free:
        return Decision(keep=True)
    for phrase in lexicon.all_phrases():
        if _phrase_in(phrase, question):
            return Decision(keep=False, phrase=phrase)
    return Decision(keep=True)


def filter_prohibited(
    records: list[QuintupleRecord], lexicon: ProhibitedLexicon | None = None
) -> tuple[list[QuintupleRecord], list[QuintupleRecord], dict]:
    """Apply detect_prohibited over a record list; returns (kept, removed, phrase counts)."""
    lexicon = lexicon or ProhibitedLexicon.load()
    kept, removed = [], []
    phrase_counts: dict[str, int] = {}
    for record in records:
        decision = detect_prohibited(record.question, record.task, lexicon)
        if decision.keep:
            kept.append(record)
        else:
            removed.append(record)
            phrase_counts[decision.phrase] = phrase_counts.get(decision.phrase, 0) + 1
    return kept, removed, phrase_counts


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens for alphabetic runs; single-character tokens for CJK.

    Single ASCII characters (option letters, stray digits) are formatting
    artifacts rather than words, so they never count toward prevalence.
    """
    tokens = []
    for t in _TOKEN_RE.findall(text):
        if len(t) == 1 and t.isascii():
            continue
        tokens.append(t.lower())
    return tokens


@dataclass
class BiasReport:
    """Non-stopword keywords whose question prevalence exceeds the threshold."""

    threshold: float = DEFAULT_BIAS_THRESHOLD
    groups: dict = field(default_factory=dict)  # (task, language) -> [{keyword, prevalence}]

    def flagged(self, task: str, language: str) -> list[str]:
        return [e["keyword"] for e in self.groups.get((task, language), [])]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "groups": {
                f"{task}/{lang}": entries for (task, lang), entries in sorted(self.groups.items())
            },
        }


def _group_key(record: QuintupleRecord) -> tuple[str, str]:
    return (record.task.base.value, record.language)


def scan_frequency_bias(
    records: list[QuintupleRecord],
    stopwords: dict | None = None,
    threshold: float = DEFAULT_BIAS_THRESHOLD,
) -> BiasReport:
    """Per (task, language) group, report tokens present in > threshold of questions.

    Prevalence is per-question containment (a question counts once however
    often the token repeats); stopwords never get reported.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    stopwords = stopwords if stopwords is not None else load_stopwords()
    groups: dict[tuple[str, str], list[QuintupleRecord]] = {}
    for record in records:
        groups.setdefault(_group_key(record), []).append(record)

    report = BiasReport(threshold=threshold)
    for key, members in groups.items():
        _, language = key
        stop = stopwords.get(language, frozenset())
        containment: dict[str, int] = {}
        for record in members:
            for token in set(tokenize(record.question)):
                containment[token] = containment.get(token, 0) + 1
        total = len(members)
        entries = []
        for token, count in containment.items():
            if token in stop:
                continue
            prevalence = count / total
            if prevalence > threshold:
                entries.append({"keyword": token, "prevalence": prevalence})
        if entries:
            entries.sort(key=lambda e: (-e["prevalence"], e["keyword"]))
            report.groups[key] = entries
    return report


def minimal_removal(containing: int, total: int, threshold: float) -> int:
    """Smallest k with (containing - k) / (total - k) <= threshold."""
    if containing >= total:
        return containing  # keyword saturates the group; only full removal helps
    guess = max(0, math.ceil((containing - threshold * total) / (1 - threshold)) - 2)
    k = guess
    while containing - k > threshold * (total - k):
        k += 1
    return k


def apply_bias_filter(
    records: list[QuintupleRecord],
    report: BiasReport,
    seed: int = 0,
    strict: bool = False,
) -> tuple[list[QuintupleRecord], list[QuintupleRecord]]:
    """Remove seeded-random keyword-bearing questions until prevalence fits.

    Within each flagged (task, language, keyword) the filter removes the
    minimal number of uniformly chosen questions containing the keyword so
    that its prevalence among survivors drops to the threshold or below.
    ``strict`` instead drops every question containing a flagged keyword.
    Deterministic for a fixed seed.
    """
    groups: dict[tuple[str, str], list[int]] = {}
    for idx, record in enumerate(records):
        groups.setdefault(_group_key(record), []).append(idx)

    removed_idx: set[int] = set()
    for key in sorted(groups):
        flagged = report.flagged(*key)
        if not flagged:
            continue
        task, language = key
        rng = random.Random(f"{seed}:{task}:{language}")
        survivors = list(groups[key])
        if strict:
            drop = [
                i
                for i in survivors
                if set(tokenize(records[i].question)) & set(flagged)
            ]
            removed_idx.update(drop)
            continue
        # Removing rows for one keyword shifts every other keyword's
        # prevalence (the denominator shrinks), so iterate to a fixed point.
        while True:
            offender = None
            for keyword in sorted(flagged):
                containing = [i for i in survivors if keyword in set(tokenize(records[i].question))]
                if len(containing) > report.threshold * len(survivors):
                    offender = (keyword, containing)
                    break
            if offender is None:
                break
            keyword, containing = offender
            k = minimal_removal(len(containing), len(survivors), report.threshold)
            drop = set(rng.sample(containing, k))
            removed_idx.update(drop)
            survivors = [i for i in survivors if i not in drop]

    kept = [r for i, r in enumerate(records) if i not in removed_idx]
    removed = [r for i, r in enumerate(records) if i in removed_idx]
    return kept, removed


@dataclass
class ScoreDistribution:
    counts: dict
    total: int

    @classmethod
    def from_records(cls, records: list[QuintupleRecord]) -> "ScoreDistribution":
        counts = {s: 0 for s in range(1, 6)}
        for record in records:
            if record.score is None:
                raise PreconditionError(f"record {record.id!r} is unscored")
            counts[record.score] += 1
        return cls(counts=counts, total=len(records))


def score_inspection(
    backend: Backend,
    record: QuintupleRecord,
    registry: TemplateRegistry | None = None,
    retry_budget: int = 2,
) -> QuintupleRecord:
    """Score one record on the 1..5 scale with the inspection prompt."""
    if record.score is not None:
        raise PreconditionError(f"record {record.id!r} is already scored")
    registry = registry or default_registry()
    prompt = registry.render(
        TemplateKind.INSPECTION,
        record.task,
        record.language,
        {"u": record.unlabeled, "q": record.question, "l": record.logic, "a": record.answer},
    )
    tags = {"kind": "inspection", "task": record.task.base.value, "language": record.language}

    attempts: list[str] = []
    last_error: ExtractionError | None = None
    for attempt in range(max(1, retry_budget)):
        request_id = f"inspect:{record.id}#a{attempt}"
        result = backend.complete(prompt, request_id, tags)
        attempts.append(result.text)
        try:
            parsed = extract_structured(result.text, "inspection-pair")
        except ExtractionError as exc:
            last_error = exc
            continue
        return with_score(record, parsed["score"], parsed["analysis_steps"])
    raise GenerationFailed(reason=str(last_error), attempts=attempts)


def score_records(
    backend: Backend,
    records: list[QuintupleRecord],
    registry: TemplateRegistry | None = None,
    retry_budget: int = 2,
    parallelism: int = 1,
) -> tuple[list[QuintupleRecord], list[RejectEntry]]:
    """Score all records; unscorable ones go to the reject list, never onward."""

    def work(record: QuintupleRecord):
        try:
            return score_inspection(backend, record, registry, retry_budget)
        except GenerationFailed as exc:
            return RejectEntry(
                pairing_id=record.id,
                task=record.task.base.value,
                language=record.language,
                attempts=exc.attempts,
                reason=exc.reason,
            )

    scored: list[QuintupleRecord] = []
    rejects: list[RejectEntry] = []
    for outcome in map_bounded(work, records, parallelism):
        if isinstance(outcome, QuintupleRecord):
            scored.append(outcome)
        else:
            rejects.append(outcome)
    return scored, rejects


def threshold_filter(
    records: list[QuintupleRecord],
) -> tuple[list[QuintupleRecord], list[QuintupleRecord], int]:
    """Drop low-quality records by inspection score.

    The default cutoff removes scores <= 2. When strictly more than 20% of
    the pool scored exactly 2 the task is likely just easy, so the cutoff
    relaxes to 1. Returns (kept, removed, applied_cutoff).
    """
    if not records:
        return [], [], 2
    score2 = 0
    for record in records:
        if record.score is None:
            raise PreconditionError(f"record {record.id!r} is unscored")
        if record.score == 2:
            score2 += 1
    # p2 > 0.20, compared exactly in integers
    cutoff = 1 if 5 * score2 > len(records) else 2
    kept = [r for r in records if r.score > cutoff]
    removed = [r for r in records if r.score <= cutoff]
    return kept, removed, cutoff


def threshold_filter_grouped(
    records: list[QuintupleRecord],
) -> tuple[list[QuintupleRecord], list[QuintupleRecord], dict]:
    """Apply the threshold rule independently per (task, language) group."""
    groups: dict[tuple[str, str], list[QuintupleRecord]] = {}
    for record in records:
        groups.setdefault(_group_key(record), []).append(record)
    kept_all, removed_all = [], []
    cutoffs = {}
    for key in sorted(groups):
        kept, removed, cutoff = threshold_filter(groups[key])
        kept_all.extend(kept)
        removed_all.extend(removed)
        cutoffs[key] = cutoff
    return kept_all, removed_all, cutoffs


@dataclass
class AuditResult:
    dependent: int
    independent: int
    undecided: int

    @property
    def rate(self) -> float:
        decided = self.dependent + self.independent
        return self.dependent / decided if decided else 0.0

    def to_dict(self) -> dict:
        return {
            "dependent": self.dependent,
            "independent": self.independent,
            "undecided": self.undecided,
            "rate": self.rate,
        }


def audit_independence(
    backend: Backend,
    questions: list[str],
    language: str = "en",
    registry: TemplateRegistry | None = None,
    retry_budget: int = 2,
    parallelism: int = 1,
) -> AuditResult:
    """Ask the judge whether each question depends on an unseen text.

    Questions whose verdict stays unparseable after retries count as
    undecided and drop out of the rate denominator.
    """
    registry = registry or default_registry()
    judge_task = ResolvedTask(base=coerce_task("closed-book-qa").base)

    def work(item: tuple[int, str]) -> str:
        index, question = item
        prompt = registry.render(TemplateKind.INDEPENDENCE_JUDGE, judge_task, language, {"q": question})
        tags = {"kind": "independence-judge", "language": language}
        for attempt in range(max(1, retry_budget)):
            result = backend.complete(prompt, f"judge:q{index:06d}#a{attempt}", tags)
            try:
                return extract_structured(result.text, "yes-no")["verdict"]
            except ExtractionError:
                continue
        return "undecided"

    verdicts = map_bounded(work, list(enumerate(questions)), parallelism)
    return AuditResult(
        dependent=sum(1 for v in verdicts if v == "yes"),
        independent=sum(1 for v in verdicts if v == "no"),
        undecided=sum(1 for v in verdicts if v == "undecided"),
    )

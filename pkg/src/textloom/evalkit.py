"""Evaluation metrics for specialist-model outputs: SQuAD F1, Rouge-L, accuracy."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_CJK_RE = re.compile(r"[㐀-鿿豈-﫿]")
_PUNCT = set(string.punctuation) | set("，。！？；：「」『』（）《》、“”‘’【】")


def _strip_punct(text: str) -> str:
    return "".join(ch for ch in text if ch not in _PUNCT)


def _tokens(text: str, remove_articles: bool) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace; CJK runs become chars."""
    text = _strip_punct(text.lower())
    if remove_articles:
        text = _ARTICLE_RE.sub(" ", text)
    # split CJK characters apart so mixed and Chinese-only text tokenizes
    text = _CJK_RE.sub(lambda m: f" {m.group(0)} ", text)
    return text.split()


def squad_f1(prediction: str, references: list[str]) -> float:
    """Token-bag F1 after SQuAD-style normalization, maxed over references."""
    if not references:
        raise ValueError("references must be non-empty")
    pred_tokens = _tokens(prediction, remove_articles=True)
    best = 0.0
    for reference in references:
        ref_tokens = _tokens(reference, remove_articles=True)
        if not pred_tokens or not ref_tokens:
            score = 1.0 if pred_tokens == ref_tokens else 0.0
        else:
            overlap = sum((Counter(pred_tokens) & Counter(ref_tokens)).values())
            if overlap == 0:
                score = 0.0
            else:
                precision = overlap / len(pred_tokens)
                recall = overlap / len(ref_tokens)
                score = 2 * precision * recall / (precision + recall)
        best = max(best, score)
    return best


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0] * (len(b) + 1)
        for j, other in enumerate(b, start=1):
            if token == other:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[-1]


def rouge_l(prediction: str, reference: str) -> float:
    """Sentence-level LCS F-measure with beta=1.

    Tokenization matches squad_f1 minus article removal; CJK text falls back
    to character tokens. Zero when either side is empty.
    """
    pred_tokens = _tokens(prediction, remove_articles=False)
    ref_tokens = _tokens(reference, remove_articles=False)
    if not pred_tokens or not ref_tokens:
        return 0.0
    lcs = _lcs_length(pred_tokens, ref_tokens)
    if lcs == 0:
        return 0.0
    precision = lcs / len(pred_tokens)
    recall = lcs / len(ref_tokens)
    return 2 * precision * recall / (precision + recall)


_NLI_LABELS = ("yes", "no", "maybe")
_NLI_RE = re.compile(r"\b(yes|no|maybe)\b", re.IGNORECASE)


def _extract_letter(prediction: str, letters: list[str]) -> str | None:
    found: list[str] = []
    for letter in letters:
        if re.search(rf"\b{re.escape(letter)}\b", prediction):
            found.append(letter)
    distinct = set(found)
    if len(distinct) != 1:
        return None  # nothing found, or ambiguous multi-letter answer
    return found[0]


def choice_accuracy(prediction: str, gold_label: str, options: list[str] | None = None) -> int:
    """Score one choice or yes/no prediction as 0/1.

    Choice tasks extract the single standalone option letter (word-boundary
    match); one distinct letter must appear or the prediction scores 0. NLI
    predictions match the first yes/no/maybe token, case-insensitively.
    """
    gold = gold_label.strip()
    if gold.lower() in _NLI_LABELS:
        match = _NLI_RE.search(prediction)
        return int(bool(match) and match.group(1).lower() == gold.lower())
    letters = [opt.strip() for opt in (options or ["A", "B", "C", "D"])]
    extracted = _extract_letter(prediction, letters)
    return int(extracted == gold)


@dataclass(frozen=True)
class EvalRecord:
    id: str
    task: str
    prediction: str
    references: tuple
    options: tuple | None = None
    metric: str | None = None

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"eval record {self.id!r} has no references")


# Which metric each task family uses when the record doesn't say.
_TASK_METRICS = {
    "extractive-qa": "squad_f1",
    "nli": "accuracy",
    "multi-choice-single": "accuracy",
    "multi-choice-multi": "accuracy",
}


def _metric_for(record: EvalRecord) -> str:
    if record.metric:
        return record.metric
    return _TASK_METRICS.get(record.task, "rouge_l")


def score_record(record: EvalRecord) -> float:
    metric = _metric_for(record)
    if metric == "squad_f1":
        return squad_f1(record.prediction, list(record.references))
    if metric == "rouge_l":
        return max(rouge_l(record.prediction, ref) for ref in record.references)
    if metric == "accuracy":
        return float(
            choice_accuracy(record.prediction, record.references[0], list(record.options or ()))
        )
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class EvalReport:
    per_task: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_task": self.per_task}


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    """Read eval inputs from JSONL of {id, task, prediction, references, options?}."""
    records = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(
                EvalRecord(
                    id=str(obj.get("id") or f"eval:{lineno}"),
                    task=obj["task"],
                    prediction=str(obj.get("prediction", "")),
                    references=tuple(str(r) for r in obj["references"]),
                    options=tuple(obj["options"]) if obj.get("options") else None,
                    metric=obj.get("metric"),
                )
            )
    return records


def evaluate(records: list[EvalRecord]) -> EvalReport:
    """Mean score and count per task, using each task's metric."""
    sums: dict[str, list] = {}
    for record in records:
        entry = sums.setdefault(record.task, [0.0, 0, _metric_for(record)])
        entry[0] += score_record(record)
        entry[1] += 1
    report = EvalReport()
    for task, (total, count, metric) in sorted(sums.items()):
        report.per_task[task] = {"metric": metric, "mean": total / count, "count": count}
    return report

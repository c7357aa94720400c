"""Pool balancing, SFT pair assembly, JSONL export, and shaped statistics."""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, PreconditionError
from .synthesis import QuintupleRecord
from .taskspec import LANGUAGES, TABLE_ORDER, TemplateKind, TemplateRegistry, default_registry


@dataclass(frozen=True)
class BalanceCaps:
    per_task_language_cap: int = 50000
    per_score_language_cap: int = 2000

    def __post_init__(self):
        if self.per_task_language_cap <= 0 or self.per_score_language_cap <= 0:
            raise ConfigError("balance caps must be positive")


def _capped_group(indices: list[int], cap: int, rng: random.Random) -> list[int]:
    if len(indices) <= cap:
        return indices
    return sorted(rng.sample(indices, cap))


def downsample(
    records: list[QuintupleRecord],
    caps: BalanceCaps,
    seed: int,
    pool: str = "synthesis",
) -> list[QuintupleRecord]:
    """Cap over-sized groups by uniform seeded sampling, order preserved.

    Every (task, language) group gets trimmed to the task cap; inspection
    pools are additionally trimmed to the per-(score, language) cap. Groups
    under their cap pass through untouched.
    """
    if pool not in ("synthesis", "inspection"):
        raise ConfigError(f"unknown pool {pool!r}")

    groups: dict[tuple[str, str], list[int]] = {}
    for idx, record in enumerate(records):
        groups.setdefault((record.task.base.value, record.language), []).append(idx)

    surviving: set[int] = set()
    for (task, language), indices in sorted(groups.items()):
        rng = random.Random(f"{seed}:task:{task}:{language}")
        surviving.update(_capped_group(indices, caps.per_task_language_cap, rng))

    if pool == "inspection":
        score_groups: dict[tuple[int, str], list[int]] = {}
        for idx in sorted(surviving):
            record = records[idx]
            if record.score is None:
                raise PreconditionError(f"record {record.id!r} is unscored")
            score_groups.setdefault((record.score, record.language), []).append(idx)
        surviving = set()
        for (score, language), indices in sorted(score_groups.items()):
            rng = random.Random(f"{seed}:score:{score}:{language}")
            surviving.update(_capped_group(indices, caps.per_score_language_cap, rng))

    return [r for i, r in enumerate(records) if i in surviving]


@dataclass(frozen=True)
class SftExample:
    """One (input, target) supervised fine-tuning pair."""

    mode: str  # synthesis | inspection
    input: str
    target: str
    meta: dict

    def to_dict(self) -> dict:
        return {"mode": self.mode, "input": self.input, "target": self.target, "meta": self.meta}


def assemble_sft(
    records: list[QuintupleRecord],
    mode: str,
    registry: TemplateRegistry | None = None,
) -> list[SftExample]:
    """Turn records into SFT pairs.

    Synthesis pairs condition on (source text, task) and target the
    (question, logic, answer) triple; inspection pairs condition on the full
    record and target the (analysis, score) pair. Targets use the same JSON
    schemas the parser reads, so the trained model's outputs feed back
    through extract_structured unchanged.
    """
    if mode not in ("synthesis", "inspection"):
        raise ConfigError(f"unknown SFT mode {mode!r}")
    registry = registry or default_registry()
    examples = []
    for record in records:
        if mode == "synthesis":
            prompt = registry.render(
                TemplateKind.GENERATION, record.task, record.language, {"u": record.unlabeled}
            )
            template = registry.lookup(TemplateKind.GENERATION, record.task.base, record.language)
            target = json.dumps(
                {
                    "question": record.question,
                    "thinking_steps": record.logic,
                    "answer": record.answer,
                },
                ensure_ascii=False,
            )
        else:
            if record.score is None:
                raise PreconditionError(f"record {record.id!r} is unscored; cannot assemble inspection pair")
            prompt = registry.render(
                TemplateKind.INSPECTION,
                record.task,
                record.language,
                {
                    "u": record.unlabeled,
                    "q": record.question,
                    "l": record.logic,
                    "a": record.answer,
                },
            )
            template = registry.lookup(TemplateKind.INSPECTION, record.task.base, record.language)
            analysis = record.analysis or f"Scored {record.score} on the 5-point scale."
            target = json.dumps(
                {"analysis_steps": analysis, "score": str(record.score)},
                ensure_ascii=False,
            )
        examples.append(
            SftExample(
                mode=mode,
                input=prompt,
                target=target,
                meta={
                    "task": record.task.base.value,
                    "language": record.language,
                    "record_id": record.id,
                    "template_version": template.version,
                },
            )
        )
    return examples


@dataclass
class DatasetManifest:
    """The machine-readable run record that makes an export regenerable."""

    counts: dict = field(default_factory=dict)
    caps: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    template_versions: dict = field(default_factory=dict)
    backend_models: dict = field(default_factory=dict)
    reject_totals: dict = field(default_factory=dict)
    stage_counts: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "caps": self.caps,
            "seeds": self.seeds,
            "template_versions": self.template_versions,
            "backend_models": self.backend_models,
            "reject_totals": self.reject_totals,
            "stage_counts": self.stage_counts,
            "checksums": self.checksums,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetManifest":
        return cls(**{k: obj.get(k, {}) for k in (
            "counts", "caps", "seeds", "template_versions",
            "backend_models", "reject_totals", "stage_counts", "checksums",
        )})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def count_examples(examples: list[SftExample]) -> dict:
    """Tally examples into the manifest layout: per-task-language plus inspection."""
    synthesis: dict[str, dict[str, int]] = {}
    inspection: dict[str, int] = {}
    for example in examples:
        task = example.meta["task"]
        language = example.meta["language"]
        if example.mode == "synthesis":
            synthesis.setdefault(task, {}).setdefault(language, 0)
            synthesis[task][language] += 1
        else:
            inspection.setdefault(language, 0)
            inspection[language] += 1
    return {"synthesis": synthesis, "inspection": inspection}


def export_jsonl(
    examples: list[SftExample],
    path: str | Path,
    manifest_extra: dict | None = None,
) -> DatasetManifest:
    """Write examples as UTF-8 JSONL and the manifest alongside.

    Output is byte-identical across runs on identical inputs. If the data
    file cannot be written, no manifest appears.
    """
    path = Path(path)
    payload = "".join(
        json.dumps(example.to_dict(), ensure_ascii=False) + "\n" for example in examples
    )
    path.write_bytes(payload.encode("utf-8"))

    manifest = DatasetManifest(counts=count_examples(examples))
    manifest.checksums[path.name] = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    manifest.counts["examples"] = len(examples)
    for key, value in (manifest_extra or {}).items():
        setattr(manifest, key, value)
    manifest.save(path.with_name(path.name + ".manifest.json"))
    return manifest


_NAME_WIDTH = 36
_NUM_WIDTH = 10


def _stats_row(label: str, en: int, zh: int) -> str:
    return f"{label:<{_NAME_WIDTH}}{en:>{_NUM_WIDTH}}{zh:>{_NUM_WIDTH}}"


def summarize(manifest: DatasetManifest) -> str:
    """Render per-(task, language) counts in the fixed table layout.

    All ten task rows always appear, then the self-inspection row, then the
    total, whatever the manifest holds.
    """
    synthesis = manifest.counts.get("synthesis", {})
    inspection = manifest.counts.get("inspection", {})
    lines = [f"{'Task Type':<{_NAME_WIDTH}}{'English':>{_NUM_WIDTH}}{'Chinese':>{_NUM_WIDTH}}"]
    lines.append("-" * (_NAME_WIDTH + 2 * _NUM_WIDTH))
    totals = {"en": 0, "zh": 0}
    for task in TABLE_ORDER:
        per_lang = synthesis.get(task.value, {})
        en, zh = int(per_lang.get("en", 0)), int(per_lang.get("zh", 0))
        totals["en"] += en
        totals["zh"] += zh
        lines.append(_stats_row(task.table_label, en, zh))
    lines.append("-" * (_NAME_WIDTH + 2 * _NUM_WIDTH))
    insp_en, insp_zh = int(inspection.get("en", 0)), int(inspection.get("zh", 0))
    totals["en"] += insp_en
    totals["zh"] += insp_zh
    lines.append(_stats_row("Self-Inspection", insp_en, insp_zh))
    lines.append("-" * (_NAME_WIDTH + 2 * _NUM_WIDTH))
    lines.append(_stats_row("Total", totals["en"], totals["zh"]))
    return "\n".join(lines) + "\n"


def stats_payload(manifest: DatasetManifest) -> dict:
    """Machine-readable companion to the text table."""
    synthesis = manifest.counts.get("synthesis", {})
    inspection = manifest.counts.get("inspection", {})
    rows = []
    totals = {lang: 0 for lang in LANGUAGES}
    for task in TABLE_ORDER:
        per_lang = {lang: int(synthesis.get(task.value, {}).get(lang, 0)) for lang in LANGUAGES}
        for lang in LANGUAGES:
            totals[lang] += per_lang[lang]
        rows.append({"label": task.table_label, "task": task.value, **per_lang})
    insp = {lang: int(inspection.get(lang, 0)) for lang in LANGUAGES}
    for lang in LANGUAGES:
        totals[lang] += insp[lang]
    rows.append({"label": "Self-Inspection", "task": "self-inspection", **insp})
    rows.append({"label": "Total", "task": "total", **totals})
    return {"rows": rows}

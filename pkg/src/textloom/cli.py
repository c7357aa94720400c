"""Pipeline orchestration: resumable, manifest-tracked stages behind one command.

Stages communicate exclusively through files in the run directory, so every
intermediate is inspectable and any stage can be rerun; a checksum guard makes
rerunning a completed stage with unchanged inputs a no-op.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import backend as backend_mod
from . import corpus as corpus_mod
from . import dataset as dataset_mod
from . import evalkit as evalkit_mod
from . import quality as quality_mod
from . import synthesis as synthesis_mod
from .errors import ConfigError, PipelineError, StageDependencyError
from .taskspec import ResolvedTask, TaskType, coerce_task, default_registry, resolve_task

COMMANDS = (
    "ingest",
    "pair",
    "synthesize",
    "supplement-logic",
    "inspect",
    "filter",
    "assemble",
    "export",
    "stats",
    "audit",
    "eval",
)

ARTIFACTS = {
    "records": "corpus/records.jsonl",
    "seeds": "corpus/seeds.jsonl",
    "ingest_report": "reports/ingest.json",
    "pairings_distilled": "pairings/distilled.jsonl",
    "pairings_candidate": "pairings/candidate.jsonl",
    "quintuples_distilled": "quintuples/distilled.jsonl",
    "quintuples_candidate": "quintuples/candidate.jsonl",
    "quintuples_supplemented": "quintuples/supplemented.jsonl",
    "scored": "scored/scored.jsonl",
    "filtered_synthesis": "filtered/synthesis.jsonl",
    "filtered_scored": "filtered/scored_kept.jsonl",
    "filter_report": "reports/filter_report.json",
    "sft_synthesis": "sft/synthesis.jsonl",
    "sft_inspection": "sft/inspection.jsonl",
    "export": "export/train.jsonl",
    "export_manifest": "export/train.jsonl.manifest.json",
    "stats_txt": "reports/stats.txt",
    "stats_json": "reports/stats.json",
    "audit": "reports/audit.json",
    "eval": "reports/eval.json",
}


@dataclass
class RunConfig:
    run_dir: Path
    seed: int = 0
    parallelism: int = 1
    retry_budget: int = synthesis_mod.DEFAULT_RETRY_BUDGET
    pairing_count: int = 100
    disjoint_candidate: bool = False
    prefix_question: bool = True
    bias_threshold: float = quality_mod.DEFAULT_BIAS_THRESHOLD
    bias_strict: bool = False
    threshold_per_dataset: bool = False
    sources: list = field(default_factory=list)
    seeds_path: str | None = None
    task_weights: dict = field(default_factory=dict)
    backends: dict = field(default_factory=dict)
    caps: dataset_mod.BalanceCaps = field(default_factory=dataset_mod.BalanceCaps)
    eval_input: str | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        raw = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} did not parse to a mapping")
        raw.update(overrides or {})
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        base_dir = base_dir or Path.cwd()

        def _resolve_path(value: str) -> str:
            p = Path(value)
            return str(p if p.is_absolute() else base_dir / p)

        if "run_dir" not in raw:
            raise ConfigError("config field missing: run_dir")
        sources = []
        for key, entry in (raw.get("sources") or {}).items():
            if "path" not in entry:
                raise ConfigError(f"config field missing: sources.{key}.path")
            sources.append(
                corpus_mod.SourceDescriptor(
                    key=key,
                    path=_resolve_path(entry["path"]),
                    format=entry.get("format", "jsonl"),
                    language=entry.get("language", "en"),
                )
            )

        novel: dict[str, ResolvedTask] = {}
        for name, entry in (raw.get("novel_tasks") or {}).items():
            novel[name] = resolve_task(
                name,
                requires_context=bool(entry.get("requires_context", False)),
                instruction_prefix=entry.get("instruction_prefix"),
            )

        def _resolve_weight_key(key: str):
            return novel[key] if key in novel else coerce_task(key)

        weights_raw = raw.get("task_weights") or {}
        if weights_raw and all(k in ("en", "zh") for k in weights_raw):
            task_weights = {
                lang: {_resolve_weight_key(k): float(w) for k, w in table.items()}
                for lang, table in weights_raw.items()
            }
        else:
            task_weights = {_resolve_weight_key(k): float(w) for k, w in weights_raw.items()}

        backends = {}
        for role, entry in (raw.get("backends") or {}).items():
            entry = dict(entry)
            if entry.get("fixtures"):
                entry["fixtures"] = _resolve_path(entry["fixtures"])
            backends[role] = backend_mod.profile_from_dict(entry)

        caps_raw = raw.get("caps") or {}
        pairing_raw = raw.get("pairing") or {}
        return cls(
            run_dir=Path(_resolve_path(str(raw["run_dir"]))),
            seed=int(raw.get("seed", 0)),
            parallelism=int(raw.get("parallelism", 1)),
            retry_budget=int(raw.get("retry_budget", synthesis_mod.DEFAULT_RETRY_BUDGET)),
            pairing_count=int(pairing_raw.get("count", raw.get("pairing_count", 100))),
            disjoint_candidate=bool(pairing_raw.get("disjoint_candidate", False)),
            prefix_question=bool(raw.get("prefix_question", True)),
            bias_threshold=float(raw.get("bias_threshold", quality_mod.DEFAULT_BIAS_THRESHOLD)),
            bias_strict=bool(raw.get("bias_strict", False)),
            threshold_per_dataset=bool(raw.get("threshold_per_dataset", False)),
            sources=sources,
            seeds_path=_resolve_path(raw["seeds_path"]) if raw.get("seeds_path") else None,
            task_weights=task_weights,
            backends=backends,
            caps=dataset_mod.BalanceCaps(
                per_task_language_cap=int(caps_raw.get("per_task_language", 50000)),
                per_score_language_cap=int(caps_raw.get("per_score_language", 2000)),
            ),
            eval_input=_resolve_path(raw["eval_input"]) if raw.get("eval_input") else None,
            raw=raw,
        )

    def backend_for(self, role: str) -> backend_mod.Backend:
        if role not in self.backends:
            raise ConfigError(f"config field missing: backends.{role}")
        return backend_mod.make_backend(self.backends[role])

    def path(self, artifact: str) -> Path:
        return self.run_dir / ARTIFACTS[artifact]


# ---------------------------------------------------------------------------
# Run-directory plumbing


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """One stage at a time per run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(
            f"run directory is locked ({lock_path}); remove the lock if no run is active"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fingerprint(config_slice: dict, files: list[Path]) -> str:
    blob = json.dumps(config_slice, sort_keys=True, ensure_ascii=False, default=str)
    digest = hashlib.sha256(blob.encode("utf-8"))
    for path in files:
        digest.update(_sha256_file(path).encode("ascii"))
    return digest.hexdigest()


def load_manifest(cfg: RunConfig) -> dict:
    path = cfg.run_dir / "manifest.json"
    if path.is_file():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"stages": {}, "usage": {}}


def save_manifest(cfg: RunConfig, manifest: dict) -> None:
    write_json(cfg.run_dir / "manifest.json", manifest)


def _require(cfg: RunConfig, stage: str, *artifacts: str) -> None:
    for artifact in artifacts:
        if not cfg.path(artifact).is_file():
            raise StageDependencyError(stage, ARTIFACTS[artifact])


def _stage_guard(cfg: RunConfig, manifest: dict, stage_key: str, fingerprint: str, outputs: list[str]) -> bool:
    """True when the stage already ran on identical inputs and outputs exist."""
    entry = manifest["stages"].get(stage_key)
    if not entry or entry.get("fingerprint") != fingerprint:
        return False
    return all(cfg.path(name).is_file() for name in outputs)


def _finish_stage(
    cfg: RunConfig,
    manifest: dict,
    stage_key: str,
    fingerprint: str,
    outputs: list[str],
    counts: dict,
    backend: backend_mod.Backend | None = None,
) -> None:
    manifest["stages"][stage_key] = {
        "fingerprint": fingerprint,
        "outputs": {name: _sha256_file(cfg.path(name)) for name in outputs},
        "counts": counts,
    }
    if backend is not None:
        manifest["usage"][stage_key] = backend.usage_report().as_dict()
    manifest.setdefault("seeds", {})["run"] = cfg.seed
    manifest["retry_budget"] = cfg.retry_budget
    manifest["template_versions"] = default_registry().versions()
    manifest["backend_models"] = {
        role: profile.model_name for role, profile in sorted(cfg.backends.items())
    }
    save_manifest(cfg, manifest)


# ---------------------------------------------------------------------------
# Record (de)serialization for stage files


def _pairing_rows(pairings: list[corpus_mod.Pairing]):
    for p in pairings:
        yield {
            "id": p.id,
            "record_id": p.record.id,
            "task": p.task.base.value,
            "prefix": p.task.prefix,
            "display_name": p.task.display_name,
            "seed": p.seed,
        }


def _load_pairings(cfg: RunConfig, stage: str) -> list[corpus_mod.Pairing]:
    records = {
        row["id"]: corpus_mod.UnlabeledRecord(**row) for row in read_jsonl(cfg.path("records"))
    }
    pairings = []
    for row in read_jsonl(cfg.path(f"pairings_{stage}")):
        task = ResolvedTask(
            base=TaskType(row["task"]),
            prefix=row.get("prefix"),
            display_name=row.get("display_name", ""),
        )
        pairings.append(
            corpus_mod.Pairing(
                id=row["id"], record=records[row["record_id"]], task=task, seed=row["seed"]
            )
        )
    return pairings


def _load_quintuples(path: Path) -> list[synthesis_mod.QuintupleRecord]:
    return [synthesis_mod.QuintupleRecord.from_dict(row) for row in read_jsonl(path)]


# ---------------------------------------------------------------------------
# Stages


def stage_ingest(cfg: RunConfig, manifest: dict) -> None:
    if not cfg.sources:
        raise ConfigError("config field missing: sources")
    input_files = [Path(s.path) for s in cfg.sources]
    if cfg.seeds_path:
        input_files.append(Path(cfg.seeds_path))
    slice_ = {"sources": [(s.key, s.path, s.format, s.language) for s in cfg.sources]}
    fingerprint = _fingerprint(slice_, input_files)
    outputs = ["records", "ingest_report"] + (["seeds"] if cfg.seeds_path else [])
    if _stage_guard(cfg, manifest, "ingest", fingerprint, outputs):
        print("ingest: inputs unchanged, skipping")
        return

    all_records = []
    report: dict = {"sources": {}}
    for source in cfg.sources:
        result = corpus_mod.ingest_corpus(source)
        report["sources"][source.key] = result.counts() | {"line_errors": result.line_errors}
        all_records.extend(result.records)
    before = len(all_records)
    deduped = corpus_mod.dedup(all_records)
    report["dedup"] = {"input": before, "kept": len(deduped), "removed": before - len(deduped)}

    write_jsonl(
        cfg.path("records"),
        (
            {"id": r.id, "source": r.source, "language": r.language, "text": r.text, "meta": r.meta}
            for r in deduped
        ),
    )
    seed_count = 0
    if cfg.seeds_path:
        seeds = corpus_mod.load_seeds(cfg.seeds_path)
        seed_count = len(seeds)
        write_jsonl(
            cfg.path("seeds"),
            (
                {
                    "id": s.id,
                    "language": s.language,
                    "text": s.text,
                    "question": s.question,
                    "answer": s.answer,
                    "task": s.task.value,
                }
                for s in seeds
            ),
        )
    write_json(cfg.path("ingest_report"), report)
    counts = {"records": len(deduped), "removed_dupes": before - len(deduped), "seeds": seed_count}
    _finish_stage(cfg, manifest, "ingest", fingerprint, outputs, counts)
    print(f"ingest: {len(deduped)} records ({before - len(deduped)} duplicates removed)")


def _serialized_weights(cfg: RunConfig) -> dict:
    def _key(task) -> str:
        resolved = coerce_task(task)
        return f"{resolved.base.value}|{resolved.prefix or ''}"

    if cfg.task_weights and all(isinstance(v, dict) for v in cfg.task_weights.values()):
        return {
            lang: {_key(k): w for k, w in table.items()}
            for lang, table in cfg.task_weights.items()
        }
    return {_key(k): w for k, w in cfg.task_weights.items()}


def stage_pair(cfg: RunConfig, manifest: dict, stage: str) -> None:
    _require(cfg, "pair", "records")
    if not cfg.task_weights:
        raise ConfigError("config field missing: task_weights")
    input_files = [cfg.path("records")]
    if stage == "candidate" and cfg.disjoint_candidate and cfg.path("pairings_distilled").is_file():
        input_files.append(cfg.path("pairings_distilled"))
    slice_ = {
        "stage": stage,
        "count": cfg.pairing_count,
        "seed": cfg.seed,
        "weights": _serialized_weights(cfg),
        "disjoint": cfg.disjoint_candidate,
    }
    fingerprint = _fingerprint(slice_, input_files)
    output = f"pairings_{stage}"
    if _stage_guard(cfg, manifest, f"pair:{stage}", fingerprint, [output]):
        print(f"pair[{stage}]: inputs unchanged, skipping")
        return

    records = [
        corpus_mod.UnlabeledRecord(**row) for row in read_jsonl(cfg.path("records"))
    ]
    if stage == "candidate" and cfg.disjoint_candidate and cfg.path("pairings_distilled").is_file():
        used = {row["record_id"] for row in read_jsonl(cfg.path("pairings_distilled"))}
        records = [r for r in records if r.id not in used] or records
    # distinct sub-seed per stage so the two pools draw independently
    stage_seed = cfg.seed if stage == "distilled" else cfg.seed + 1
    pairings = corpus_mod.sample_pairings(records, cfg.task_weights, cfg.pairing_count, stage_seed)
    write_jsonl(cfg.path(output), _pairing_rows(pairings))
    _finish_stage(cfg, manifest, f"pair:{stage}", fingerprint, [output], {"pairings": len(pairings)})
    print(f"pair[{stage}]: {len(pairings)} pairings")


def stage_synthesize(cfg: RunConfig, manifest: dict, stage: str) -> None:
    _require(cfg, "synthesize", f"pairings_{stage}", "records")
    role = "strong" if stage == "distilled" else "synthesizer"
    backend = cfg.backend_for(role)
    slice_ = {
        "stage": stage,
        "role": role,
        "model": backend.profile.model_name,
        "retry_budget": cfg.retry_budget,
        "prefix_question": cfg.prefix_question,
    }
    fingerprint = _fingerprint(slice_, [cfg.path(f"pairings_{stage}")])
    output = f"quintuples_{stage}"
    reject_path = cfg.run_dir / f"quintuples/rejects-{stage}.jsonl"
    if _stage_guard(cfg, manifest, f"synthesize:{stage}", fingerprint, [output]):
        print(f"synthesize[{stage}]: inputs unchanged, skipping")
        return

    pairings = _load_pairings(cfg, stage)
    records, rejects = synthesis_mod.synthesize_pairings(
        backend,
        pairings,
        stage=stage,
        retry_budget=cfg.retry_budget,
        parallelism=cfg.parallelism,
        prefix_question=cfg.prefix_question,
    )
    write_jsonl(cfg.path(output), (r.to_dict() for r in records))
    write_jsonl(reject_path, (r.to_dict() for r in rejects))
    counts = {"input": len(pairings), "records": len(records), "rejected": len(rejects)}
    _finish_stage(cfg, manifest, f"synthesize:{stage}", fingerprint, [output], counts, backend)
    print(f"synthesize[{stage}]: {len(records)} records, {len(rejects)} rejected")


def stage_supplement(cfg: RunConfig, manifest: dict) -> None:
    _require(cfg, "supplement-logic", "seeds")
    backend = cfg.backend_for("strong")
    slice_ = {"model": backend.profile.model_name, "retry_budget": cfg.retry_budget}
    fingerprint = _fingerprint(slice_, [cfg.path("seeds")])
    if _stage_guard(cfg, manifest, "supplement-logic", fingerprint, ["quintuples_supplemented"]):
        print("supplement-logic: inputs unchanged, skipping")
        return

    seeds = [
        corpus_mod.LabeledSeed(
            id=row["id"],
            language=row["language"],
            text=row["text"],
            question=row["question"],
            answer=row["answer"],
            task=TaskType(row["task"]),
        )
        for row in read_jsonl(cfg.path("seeds"))
    ]
    records, rejects = synthesis_mod.supplement_seeds(
        backend, seeds, retry_budget=cfg.retry_budget, parallelism=cfg.parallelism
    )
    write_jsonl(cfg.path("quintuples_supplemented"), (r.to_dict() for r in records))
    write_jsonl(cfg.run_dir / "quintuples/rejects-supplemented.jsonl", (r.to_dict() for r in rejects))
    counts = {"input": len(seeds), "records": len(records), "rejected": len(rejects)}
    _finish_stage(
        cfg, manifest, "supplement-logic", fingerprint, ["quintuples_supplemented"], counts, backend
    )
    print(f"supplement-logic: {len(records)} records, {len(rejects)} rejected")


def stage_inspect(cfg: RunConfig, manifest: dict, stage: str) -> None:
    source = f"quintuples_{stage}"
    _require(cfg, "inspect", source)
    backend = cfg.backend_for("strong")
    slice_ = {"model": backend.profile.model_name, "retry_budget": cfg.retry_budget, "pool": stage}
    fingerprint = _fingerprint(slice_, [cfg.path(source)])
    if _stage_guard(cfg, manifest, "inspect", fingerprint, ["scored"]):
        print("inspect: inputs unchanged, skipping")
        return

    pool = _load_quintuples(cfg.path(source))
    scored, rejects = quality_mod.score_records(
        backend, pool, retry_budget=cfg.retry_budget, parallelism=cfg.parallelism
    )
    write_jsonl(cfg.path("scored"), (r.to_dict() for r in scored))
    write_jsonl(cfg.run_dir / "scored/rejects.jsonl", (r.to_dict() for r in rejects))
    dist = quality_mod.ScoreDistribution.from_records(scored)
    counts = {
        "input": len(pool),
        "scored": len(scored),
        "rejected": len(rejects),
        "distribution": {str(k): v for k, v in dist.counts.items()},
    }
    _finish_stage(cfg, manifest, "inspect", fingerprint, ["scored"], counts, backend)
    print(f"inspect: {len(scored)} scored, {len(rejects)} rejected")


def stage_filter(cfg: RunConfig, manifest: dict) -> None:
    pool_files = [
        cfg.path(name)
        for name in ("quintuples_distilled", "quintuples_supplemented")
        if cfg.path(name).is_file()
    ]
    if not pool_files:
        raise StageDependencyError("filter", ARTIFACTS["quintuples_distilled"])
    scored_exists = cfg.path("scored").is_file()
    input_files = pool_files + ([cfg.path("scored")] if scored_exists else [])
    slice_ = {
        "bias_threshold": cfg.bias_threshold,
        "bias_strict": cfg.bias_strict,
        "per_dataset": cfg.threshold_per_dataset,
        "seed": cfg.seed,
    }
    fingerprint = _fingerprint(slice_, input_files)
    outputs = ["filtered_synthesis", "filter_report"] + (
        ["filtered_scored"] if scored_exists else []
    )
    if _stage_guard(cfg, manifest, "filter", fingerprint, outputs):
        print("filter: inputs unchanged, skipping")
        return

    pool: list[synthesis_mod.QuintupleRecord] = []
    for path in pool_files:
        pool.extend(_load_quintuples(path))

    lexicon = quality_mod.ProhibitedLexicon.load()
    kept, removed_prohibited, phrase_counts = quality_mod.filter_prohibited(pool, lexicon)
    bias_report = quality_mod.scan_frequency_bias(kept, threshold=cfg.bias_threshold)
    kept2, removed_bias = quality_mod.apply_bias_filter(
        kept, bias_report, seed=cfg.seed, strict=cfg.bias_strict
    )
    write_jsonl(cfg.path("filtered_synthesis"), (r.to_dict() for r in kept2))

    report = {
        "prohibited": {
            "input": len(pool),
            "kept": len(kept),
            "removed": len(removed_prohibited),
            "phrases": phrase_counts,
        },
        "frequency_bias": {
            "input": len(kept),
            "kept": len(kept2),
            "removed": len(removed_bias),
            "seed": cfg.seed,
            "report": bias_report.to_dict(),
        },
    }
    counts = {
        "input": len(pool),
        "kept": len(kept2),
        "removed_prohibited": len(removed_prohibited),
        "removed_bias": len(removed_bias),
    }

    if scored_exists:
        scored = _load_quintuples(cfg.path("scored"))
        if cfg.threshold_per_dataset:
            t_kept, t_removed, cutoff = quality_mod.threshold_filter(scored)
            cutoffs = {"all": cutoff}
        else:
            t_kept, t_removed, grouped = quality_mod.threshold_filter_grouped(scored)
            cutoffs = {f"{task}/{lang}": cut for (task, lang), cut in grouped.items()}
        write_jsonl(cfg.path("filtered_scored"), (r.to_dict() for r in t_kept))
        report["threshold"] = {
            "input": len(scored),
            "kept": len(t_kept),
            "removed": len(t_removed),
            "applied_cutoffs": cutoffs,
        }
        counts["threshold_kept"] = len(t_kept)
        counts["applied_cutoffs"] = cutoffs

    write_json(cfg.path("filter_report"), report)
    _finish_stage(cfg, manifest, "filter", fingerprint, outputs, counts)
    print(
        f"filter: {counts['kept']} kept "
        f"(-{counts['removed_prohibited']} prohibited, -{counts['removed_bias']} bias)"
    )


def stage_assemble(cfg: RunConfig, manifest: dict) -> None:
    _require(cfg, "assemble", "filtered_synthesis")
    scored_exists = cfg.path("scored").is_file()
    input_files = [cfg.path("filtered_synthesis")] + ([cfg.path("scored")] if scored_exists else [])
    slice_ = {
        "caps": [cfg.caps.per_task_language_cap, cfg.caps.per_score_language_cap],
        "seed": cfg.seed,
    }
    fingerprint = _fingerprint(slice_, input_files)
    outputs = ["sft_synthesis"] + (["sft_inspection"] if scored_exists else [])
    if _stage_guard(cfg, manifest, "assemble", fingerprint, outputs):
        print("assemble: inputs unchanged, skipping")
        return

    synthesis_pool = _load_quintuples(cfg.path("filtered_synthesis"))
    capped = dataset_mod.downsample(synthesis_pool, cfg.caps, cfg.seed, pool="synthesis")
    synthesis_examples = dataset_mod.assemble_sft(capped, "synthesis")
    write_jsonl(cfg.path("sft_synthesis"), (e.to_dict() for e in synthesis_examples))
    counts = {
        "synthesis": {"input": len(synthesis_pool), "capped": len(capped), "examples": len(synthesis_examples)}
    }
    if scored_exists:
        inspection_pool = _load_quintuples(cfg.path("scored"))
        capped_i = dataset_mod.downsample(inspection_pool, cfg.caps, cfg.seed, pool="inspection")
        inspection_examples = dataset_mod.assemble_sft(capped_i, "inspection")
        write_jsonl(cfg.path("sft_inspection"), (e.to_dict() for e in inspection_examples))
        counts["inspection"] = {
            "input": len(inspection_pool),
            "capped": len(capped_i),
            "examples": len(inspection_examples),
        }
    _finish_stage(cfg, manifest, "assemble", fingerprint, outputs, counts)
    print(f"assemble: {counts}")


def stage_export(cfg: RunConfig, manifest: dict) -> None:
    _require(cfg, "export", "sft_synthesis")
    inspection_exists = cfg.path("sft_inspection").is_file()
    input_files = [cfg.path("sft_synthesis")] + (
        [cfg.path("sft_inspection")] if inspection_exists else []
    )
    fingerprint = _fingerprint({}, input_files)
    outputs = ["export", "export_manifest"]
    if _stage_guard(cfg, manifest, "export", fingerprint, outputs):
        print("export: inputs unchanged, skipping")
        return

    examples = []
    for path in input_files:
        for row in read_jsonl(path):
            examples.append(
                dataset_mod.SftExample(
                    mode=row["mode"], input=row["input"], target=row["target"], meta=row["meta"]
                )
            )
    cfg.path("export").parent.mkdir(parents=True, exist_ok=True)
    stage_counts = {
        key: entry.get("counts", {}) for key, entry in sorted(manifest["stages"].items())
    }
    dataset_manifest = dataset_mod.export_jsonl(
        examples,
        cfg.path("export"),
        manifest_extra={
            "caps": {
                "per_task_language": cfg.caps.per_task_language_cap,
                "per_score_language": cfg.caps.per_score_language_cap,
            },
            "seeds": {"run": cfg.seed},
            "template_versions": default_registry().versions(),
            "backend_models": {
                role: profile.model_name for role, profile in sorted(cfg.backends.items())
            },
            "reject_totals": {
                key: entry.get("counts", {}).get("rejected", 0)
                for key, entry in sorted(manifest["stages"].items())
                if "rejected" in entry.get("counts", {})
            },
            "stage_counts": stage_counts,
        },
    )
    counts = {"examples": len(examples), "checksums": dataset_manifest.checksums}
    _finish_stage(cfg, manifest, "export", fingerprint, outputs, counts)
    print(f"export: {len(examples)} examples -> {cfg.path('export')}")


def stage_stats(cfg: RunConfig, manifest: dict) -> None:
    _require(cfg, "stats", "export_manifest")
    dataset_manifest = dataset_mod.DatasetManifest.load(cfg.path("export_manifest"))
    table = dataset_mod.summarize(dataset_manifest)
    cfg.path("stats_txt").parent.mkdir(parents=True, exist_ok=True)
    cfg.path("stats_txt").write_text(table, encoding="utf-8")
    write_json(cfg.path("stats_json"), dataset_mod.stats_payload(dataset_manifest))
    fingerprint = _fingerprint({}, [cfg.path("export_manifest")])
    _finish_stage(cfg, manifest, "stats", fingerprint, ["stats_txt", "stats_json"], {})
    print(table, end="")


def stage_audit(cfg: RunConfig, manifest: dict) -> None:
    _require(cfg, "audit", "filtered_synthesis")
    backend = cfg.backend_for("judge")
    slice_ = {"model": backend.profile.model_name, "retry_budget": cfg.retry_budget}
    fingerprint = _fingerprint(slice_, [cfg.path("filtered_synthesis")])
    if _stage_guard(cfg, manifest, "audit", fingerprint, ["audit"]):
        print("audit: inputs unchanged, skipping")
        return

    pool = _load_quintuples(cfg.path("filtered_synthesis"))
    results = {}
    for language in sorted({r.language for r in pool}):
        questions = [r.question for r in pool if r.language == language]
        outcome = quality_mod.audit_independence(
            backend,
            questions,
            language=language,
            retry_budget=cfg.retry_budget,
            parallelism=cfg.parallelism,
        )
        results[language] = outcome.to_dict()
    write_json(cfg.path("audit"), results)
    _finish_stage(cfg, manifest, "audit", fingerprint, ["audit"], results, backend)
    print(f"audit: {results}")


def stage_eval(cfg: RunConfig, manifest: dict) -> None:
    if not cfg.eval_input:
        raise ConfigError("config field missing: eval_input")
    eval_path = Path(cfg.eval_input)
    if not eval_path.is_file():
        raise StageDependencyError("eval", str(eval_path))
    fingerprint = _fingerprint({}, [eval_path])
    if _stage_guard(cfg, manifest, "eval", fingerprint, ["eval"]):
        print("eval: inputs unchanged, skipping")
        return
    records = evalkit_mod.load_eval_records(eval_path)
    report = evalkit_mod.evaluate(records)
    write_json(cfg.path("eval"), report.to_dict())
    _finish_stage(cfg, manifest, "eval", fingerprint, ["eval"], {"records": len(records)})
    print(f"eval: {report.to_dict()}")


# ---------------------------------------------------------------------------
# Entry point


def execute(command: str, cfg: RunConfig, stage: str | None = None) -> int:
    # pair/synthesize work on the distilled pool unless told otherwise;
    # inspect scores the candidate pool by default (its whole purpose).
    if stage is None:
        stage = "candidate" if command == "inspect" else "distilled"
    with run_lock(cfg.run_dir):
        manifest = load_manifest(cfg)
        if command == "ingest":
            stage_ingest(cfg, manifest)
        elif command == "pair":
            stage_pair(cfg, manifest, stage)
        elif command == "synthesize":
            stage_synthesize(cfg, manifest, stage)
        elif command == "supplement-logic":
            stage_supplement(cfg, manifest)
        elif command == "inspect":
            stage_inspect(cfg, manifest, stage)
        elif command == "filter":
            stage_filter(cfg, manifest)
        elif command == "assemble":
            stage_assemble(cfg, manifest)
        elif command == "export":
            stage_export(cfg, manifest)
        elif command == "stats":
            stage_stats(cfg, manifest)
        elif command == "audit":
            stage_audit(cfg, manifest)
        elif command == "eval":
            stage_eval(cfg, manifest)
        else:
            raise ConfigError(f"unknown command {command!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="textloom",
        description="Synthesize, filter, and export instruction-tuning data from unlabeled text.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        stage_parser = sub.add_parser(command)
        stage_parser.add_argument("--config", required=True, help="run configuration (YAML or JSON)")
        stage_parser.add_argument("--seed", type=int, default=None, help="override the run seed")
        stage_parser.add_argument(
            "--parallelism", type=int, default=None, help="bound on concurrent backend calls"
        )
        stage_parser.add_argument(
            "--stage",
            choices=("distilled", "candidate"),
            default=None,
            help="which synthesis pool this command works on",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    try:
        cfg = RunConfig.from_file(args.config, overrides)
        return execute(args.command, cfg, stage=args.stage)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

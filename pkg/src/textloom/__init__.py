"""textloom: synthesize instruction-tuning data from unlabeled domain text.

The pipeline pairs raw text with task types, drives a pluggable completion
backend through prompt templates to produce (answer, question, logic)
records, filters them for relevance and inspected quality, and exports
balanced, reproducible SFT datasets.
"""

from .backend import (
    Backend,
    BackendProfile,
    CompletionResult,
    MockBackend,
    MockRule,
    SamplingParams,
    UsageReport,
    make_backend,
)
from .corpus import (
    IngestReport,
    LabeledSeed,
    Pairing,
    SourceDescriptor,
    UnlabeledRecord,
    dedup,
    ingest_corpus,
    load_seeds,
    sample_pairings,
)
from .dataset import (
    BalanceCaps,
    DatasetManifest,
    SftExample,
    assemble_sft,
    downsample,
    export_jsonl,
    summarize,
)
from .evalkit import EvalRecord, choice_accuracy, evaluate, rouge_l, squad_f1
from .quality import (
    AuditResult,
    BiasReport,
    ProhibitedLexicon,
    ScoreDistribution,
    apply_bias_filter,
    audit_independence,
    detect_prohibited,
    scan_frequency_bias,
    score_inspection,
    threshold_filter,
)
from .synthesis import (
    ParsedGeneration,
    QuintupleRecord,
    RejectEntry,
    extract_structured,
    generate_quintuple,
    supplement_logic,
)
from .taskspec import (
    PromptTemplate,
    ResolvedTask,
    TaskType,
    TemplateKind,
    TemplateRegistry,
    render_prompt,
    resolve_task,
)

__version__ = "0.1.0"

"""Task taxonomy, the novel-task mapping rule, and the prompt template registry."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import ConfigError, RenderError, TemplateLookupError

LANGUAGES = ("en", "zh")

ASSET_ROOT = Path(__file__).parent / "assets"
TEMPLATE_ROOT = ASSET_ROOT / "templates"


class TaskType(Enum):
    """The ten built-in task categories."""

    EXTRACTIVE_QA = "extractive-qa"
    NLI = "nli"
    MULTI_CHOICE_SINGLE = "multi-choice-single"
    MULTI_CHOICE_MULTI = "multi-choice-multi"
    TEXT_GENERATION = "text-generation"
    SUMMARIZATION = "summarization"
    TEXT_CLASSIFICATION = "text-classification"
    NLU = "nlu"
    OPEN_BOOK_QA = "open-book-qa"
    CLOSED_BOOK_QA = "closed-book-qa"

    @property
    def context_free(self) -> bool:
        """True when answering must not depend on the source text.

        These are the tasks whose questions go through the prohibited-phrase
        filter: a well-formed question must stand on its own.
        """
        return self in _CONTEXT_FREE

    @property
    def prompt_label(self) -> str:
        """Short task name substituted into prompt bodies."""
        return _PROMPT_LABELS[self]

    @property
    def table_label(self) -> str:
        """Row label used by the statistics table."""
        return _TABLE_LABELS[self]


_CONTEXT_FREE = frozenset(
    {TaskType.MULTI_CHOICE_SINGLE, TaskType.MULTI_CHOICE_MULTI, TaskType.CLOSED_BOOK_QA}
)

_PROMPT_LABELS = {
    TaskType.EXTRACTIVE_QA: "extractive QA",
    TaskType.NLI: "natural language inference",
    TaskType.MULTI_CHOICE_SINGLE: "single-choice",
    TaskType.MULTI_CHOICE_MULTI: "multi-choice",
    TaskType.TEXT_GENERATION: "text generation",
    TaskType.SUMMARIZATION: "text summarization",
    TaskType.TEXT_CLASSIFICATION: "text classification",
    TaskType.NLU: "natural language understanding",
    TaskType.OPEN_BOOK_QA: "open-book",
    TaskType.CLOSED_BOOK_QA: "closed-book",
}

_TABLE_LABELS = {
    TaskType.EXTRACTIVE_QA: "Extractive QA",
    TaskType.NLI: "Natural Language Inference",
    TaskType.MULTI_CHOICE_SINGLE: "Multi-Choice QA (Single Answer)",
    TaskType.MULTI_CHOICE_MULTI: "Multi-Choice QA (Multiple Answers)",
    TaskType.TEXT_GENERATION: "Text Generation",
    TaskType.SUMMARIZATION: "Text Summarization",
    TaskType.TEXT_CLASSIFICATION: "Text Classification",
    TaskType.NLU: "Natural Language Understanding",
    TaskType.OPEN_BOOK_QA: "Open-Book QA",
    TaskType.CLOSED_BOOK_QA: "Closed-Book QA",
}

# Accepted spellings for each built-in task when resolving config strings.
_ALIASES: dict[str, TaskType] = {}
for _t in TaskType:
    _ALIASES[_t.value] = _t
    _ALIASES[_t.prompt_label.lower()] = _t
    _ALIASES[_t.table_label.lower()] = _t
_ALIASES.update(
    {
        "natural-language-inference": TaskType.NLI,
        "natural-language-understanding": TaskType.NLU,
        "text-summarization": TaskType.SUMMARIZATION,
        "single-choice": TaskType.MULTI_CHOICE_SINGLE,
        "multi-choice": TaskType.MULTI_CHOICE_MULTI,
        "open-book": TaskType.OPEN_BOOK_QA,
        "closed-book": TaskType.CLOSED_BOOK_QA,
    }
)

# Table row order: the ten tasks, then the self-inspection row, then the total.
TABLE_ORDER = (
    TaskType.EXTRACTIVE_QA,
    TaskType.NLI,
    TaskType.MULTI_CHOICE_SINGLE,
    TaskType.MULTI_CHOICE_MULTI,
    TaskType.TEXT_GENERATION,
    TaskType.SUMMARIZATION,
    TaskType.TEXT_CLASSIFICATION,
    TaskType.NLU,
    TaskType.OPEN_BOOK_QA,
    TaskType.CLOSED_BOOK_QA,
)


@dataclass(frozen=True)
class ResolvedTask:
    """A task name resolved onto the built-in taxonomy.

    Novel task names map to open-book or closed-book QA and carry the new
    task's instruction as ``prefix``; built-in names pass through unchanged.
    """

    base: TaskType
    prefix: str | None = None
    display_name: str = ""

    def __post_init__(self):
        if not self.display_name:
            object.__setattr__(self, "display_name", self.base.value)

    @property
    def is_mapped(self) -> bool:
        return self.prefix is not None


def resolve_task(
    name: str,
    requires_context: bool = False,
    instruction_prefix: str | None = None,
) -> ResolvedTask:
    """Resolve a task name to a built-in task, mapping novel names onto QA.

    A novel task becomes open-book QA when it needs the source text as input
    and closed-book QA otherwise, and must supply an instruction prefix that
    will ride along with every generated question.
    """
    if not name or not name.strip():
        raise ConfigError("task name must be non-empty")
    key = name.strip().lower()
    if key in _ALIASES:
        return ResolvedTask(base=_ALIASES[key])
    prefix = (instruction_prefix or "").strip()
    if not prefix:
        raise ConfigError(
            f"novel task {name!r} needs an instruction_prefix to map onto open/closed-book QA"
        )
    base = TaskType.OPEN_BOOK_QA if requires_context else TaskType.CLOSED_BOOK_QA
    return ResolvedTask(base=base, prefix=prefix, display_name=name.strip())


def coerce_task(task: "TaskType | ResolvedTask | str") -> ResolvedTask:
    """Normalize the accepted task spellings into a ResolvedTask."""
    if isinstance(task, ResolvedTask):
        return task
    if isinstance(task, TaskType):
        return ResolvedTask(base=task)
    return resolve_task(task)


class TemplateKind(Enum):
    GENERATION = "generation"
    LOGIC_SUPPLEMENT = "logic-supplement"
    INSPECTION = "inspection"
    INDEPENDENCE_JUDGE = "independence-judge"
    EVALUATION = "evaluation"


# Placeholders a template body may reference. ``t`` and ``prefix`` are filled
# automatically from the resolved task; the rest come from the caller.
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
KNOWN_PLACEHOLDERS = frozenset({"u", "q", "l", "a", "t", "prefix"})

REQUIRED_FIELDS = {
    TemplateKind.GENERATION: ("u",),
    TemplateKind.LOGIC_SUPPLEMENT: ("u", "q", "a"),
    TemplateKind.INSPECTION: ("u", "q", "l", "a"),
    TemplateKind.INDEPENDENCE_JUDGE: ("q",),
    TemplateKind.EVALUATION: ("q",),
}


@dataclass(frozen=True)
class PromptTemplate:
    kind: TemplateKind
    task: TaskType | None
    language: str
    body: str
    version: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body)) & KNOWN_PLACEHOLDERS


class TemplateRegistry:
    """Immutable lookup of prompt templates keyed by (kind, task, language).

    Templates live as asset files under ``templates/<kind>/<task>/<lang>.txt``
    with a manifest recording versions and checksums; task-agnostic kinds use
    ``any`` for the task segment.
    """

    def __init__(self, root: Path | None = None):
        self._root = Path(root) if root else TEMPLATE_ROOT
        manifest_path = self._root / "manifest.json"
        if not manifest_path.is_file():
            raise ConfigError(f"template manifest not found: {manifest_path}")
        self._manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        self._templates: dict[tuple[TemplateKind, str, str], PromptTemplate] = {}
        for rel, entry in self._manifest["files"].items():
            kind_s, task_s, fname = rel.split("/")
            lang = fname.removesuffix(".txt")
            body = (self._root / rel).read_text(encoding="utf-8")
            kind = TemplateKind(kind_s)
            task = None if task_s == "any" else _ALIASES[task_s]
            self._templates[(kind, task_s, lang)] = PromptTemplate(
                kind=kind, task=task, language=lang, body=body, version=entry["version"]
            )

    @property
    def version(self) -> str:
        return self._manifest["version"]

    def versions(self) -> dict[str, str]:
        """Per-file template versions, for provenance manifests."""
        return {rel: e["version"] for rel, e in sorted(self._manifest["files"].items())}

    def checksums_ok(self) -> bool:
        for rel, entry in self._manifest["files"].items():
            digest = hashlib.sha256((self._root / rel).read_bytes()).hexdigest()
            if digest != entry["sha256"]:
                return False
        return True

    def lookup(self, kind: TemplateKind, task: TaskType | None, language: str) -> PromptTemplate:
        if task is not None:
            hit = self._templates.get((kind, task.value, language))
            if hit is not None:
                return hit
        hit = self._templates.get((kind, "any", language))
        if hit is None:
            task_s = task.value if task else "any"
            raise TemplateLookupError(f"no template for ({kind.value}, {task_s}, {language})")
        return hit

    def render(
        self,
        kind: TemplateKind,
        task: ResolvedTask | TaskType,
        language: str,
        fields: dict[str, str],
    ) -> str:
        """Substitute placeholders into the template body.

        The task's short label is always available as ``{t}``. For tasks
        mapped from a novel name, the instruction prefix is prepended to the
        rendered generation prompt so it appears verbatim exactly once.
        """
        resolved = coerce_task(task)
        template = self.lookup(kind, resolved.base, language)
        values = dict(fields)
        values.setdefault("t", resolved.display_name if resolved.is_mapped else resolved.base.prompt_label)

        def substitute(match: re.Match) -> str:
            name = match.group(1)
            if name not in KNOWN_PLACEHOLDERS:
                return match.group(0)
            if name == "prefix":
                return resolved.prefix or ""
            if name not in values:
                raise RenderError(name)
            return values[name]

        text = _PLACEHOLDER_RE.sub(substitute, template.body)
        if kind is TemplateKind.GENERATION and resolved.is_mapped:
            text = f"{resolved.prefix}\n\n{text}"
        return text


_default_registry: TemplateRegistry | None = None


def default_registry() -> TemplateRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = TemplateRegistry()
    return _default_registry


def render_prompt(
    kind: TemplateKind | str,
    task: ResolvedTask | TaskType,
    language: str,
    fields: dict[str, str],
    registry: TemplateRegistry | None = None,
) -> str:
    """Render one prompt from the registry (module-level convenience)."""
    if isinstance(kind, str):
        kind = TemplateKind(kind)
    reg = registry or default_registry()
    return reg.render(kind, task, language, fields)

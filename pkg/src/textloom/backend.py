"""Completion backends: an HTTP chat-completions client and a deterministic mock.

Both meter token usage and cost behind one interface, so every synthesis and
scoring stage can run against a served model or fully offline.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .errors import BackendTimeoutError, ConfigError, ProtocolError, TransportError


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 1024

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.max_tokens <= 0:
            raise ConfigError("max_tokens must be positive")


@dataclass(frozen=True)
class MockRule:
    """One scripted mock response: matched by (kind, task, language) tags.

    ``body`` of None means the built-in deterministic body for the request
    kind; ``fault`` injects the failure modes the parser and retry paths are
    tested against.
    """

    match: dict = field(default_factory=dict)
    body: str | None = None
    fault: str | None = None  # malformed-then-valid | always-malformed | fenced | bad-score


@dataclass(frozen=True)
class BackendProfile:
    kind: str  # http-chat | mock
    model_name: str
    endpoint: str = ""
    sampling: SamplingParams = field(default_factory=SamplingParams)
    max_retries: int = 3
    timeout: float = 60.0
    price_per_input_token: float | None = None
    price_per_output_token: float | None = None
    api_key_env: str | None = None
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    fixtures: tuple[MockRule, ...] = ()

    def __post_init__(self):
        if self.kind not in ("http-chat", "mock"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http-chat" and not self.endpoint:
            raise ConfigError("http-chat profile needs an endpoint")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class UsageReport:
    requests: int
    input_tokens: int
    output_tokens: int
    failures: int
    estimated_cost: float

    def as_dict(self) -> dict:
        return {
            "requests": self.requests,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "failures": self.failures,
            "estimated_cost": self.estimated_cost,
        }


def _estimate_tokens(text: str) -> int:
    return len(text.split())


class Backend:
    """Shared metering; subclasses implement one completion call."""

    def __init__(self, profile: BackendProfile):
        self.profile = profile
        self._lock = threading.Lock()
        self._requests = 0
        self._input_tokens = 0
        self._output_tokens = 0
        self._failures = 0

    def complete(self, prompt: str, request_id: str, tags: dict | None = None) -> CompletionResult:
        if not prompt:
            raise ConfigError("prompt must be non-empty")
        result = self._complete(prompt, request_id, tags or {})
        with self._lock:
            self._requests += 1
            self._input_tokens += result.input_tokens
            self._output_tokens += result.output_tokens
        return result

    def _complete(self, prompt: str, request_id: str, tags: dict) -> CompletionResult:
        raise NotImplementedError

    def _record_failure(self, n: int = 1) -> None:
        with self._lock:
            self._failures += n

    def usage_report(self) -> UsageReport:
        with self._lock:
            p_in = self.profile.price_per_input_token or 0.0
            p_out = self.profile.price_per_output_token or 0.0
            return UsageReport(
                requests=self._requests,
                input_tokens=self._input_tokens,
                output_tokens=self._output_tokens,
                failures=self._failures,
                estimated_cost=self._input_tokens * p_in + self._output_tokens * p_out,
            )


class HttpChatBackend(Backend):
    """POSTs single-turn chat completions, retrying 429/5xx/transport errors."""

    def _complete(self, prompt: str, request_id: str, tags: dict) -> CompletionResult:
        profile = self.profile
        url = profile.endpoint.rstrip("/") + "/chat/completions"
        payload = {
            "model": profile.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": profile.sampling.temperature,
            "top_p": profile.sampling.top_p,
            "max_tokens": profile.sampling.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if profile.api_key_env:
            key = os.environ.get(profile.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"

        last_error: Exception | None = None
        timed_out = False
        for attempt in range(profile.max_retries + 1):
            if attempt > 0:
                time.sleep(min(profile.backoff_base * 2 ** (attempt - 1), profile.backoff_cap))
            try:
                response = requests.post(url, json=payload, headers=headers, timeout=profile.timeout)
            except requests.Timeout as exc:
                self._record_failure()
                last_error, timed_out = exc, True
                continue
            except requests.RequestException as exc:
                self._record_failure()
                last_error, timed_out = exc, False
                continue
            if response.status_code == 429 or response.status_code >= 500:
                self._record_failure()
                last_error = TransportError(f"HTTP {response.status_code} from {url}")
                timed_out = False
                continue
            if response.status_code != 200:
                raise ProtocolError(f"HTTP {response.status_code} from {url}: {response.text[:200]}")
            try:
                body = response.json()
                text = body["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed chat-completions response: {exc}") from exc
            usage = body.get("usage") or {}
            return CompletionResult(
                text=text,
                input_tokens=int(usage.get("prompt_tokens", _estimate_tokens(prompt))),
                output_tokens=int(usage.get("completion_tokens", _estimate_tokens(text))),
            )
        if timed_out:
            raise BackendTimeoutError(f"request {request_id} timed out after {profile.max_retries + 1} attempts")
        raise TransportError(
            f"request {request_id} failed after {profile.max_retries + 1} attempts: {last_error}"
        )


_YES_NO = ("Yes.", "No.")
_NLI_ANSWERS = ("yes", "no", "maybe")
_LETTERS = "ABCD"

_SYLLABLES = (
    "ba", "ce", "di", "fo", "gu", "ha", "je", "ki", "lo", "mu", "ne", "pa",
    "qi", "ro", "su", "ta", "ve", "wi", "xo", "yu", "za", "bre", "cli", "dro",
    "fla", "gri", "pla", "sto", "tri", "vel", "mon", "ser",
)


class _WordWell:
    """Deterministic pseudo-word source seeded by the response digest.

    Mock questions are built from stopword scaffolding plus these words, so
    synthetic corpora stay lexically diverse the way real model outputs are
    and do not trip the downstream frequency-bias filter wholesale.
    """

    def __init__(self, digest: str):
        self._value = int(digest, 16)

    def _draw(self, modulus: int) -> int:
        self._value, pick = divmod(self._value, modulus)
        if self._value < modulus:
            self._value = int(hashlib.sha256(str(pick).encode()).hexdigest(), 16)
        return pick

    def word(self) -> str:
        return "".join(_SYLLABLES[self._draw(len(_SYLLABLES))] for _ in range(3))

    def hanzi(self, n: int = 2) -> str:
        return "".join(chr(0x4E00 + self._draw(0x51A5)) for _ in range(n))


def _default_body(kind: str, task: str, language: str, digest: str) -> str:
    """A valid response body for the request kind, deterministic in the digest."""
    token = digest[:8]
    pick = int(digest[:8], 16)
    well = _WordWell(digest)
    if kind == "logic-supplement":
        body = {"thought_process": f"1. Read the question. 2. Locate the relevant span ({token}). 3. Answer."}
        return json.dumps(body, ensure_ascii=False)
    if kind == "inspection":
        body = {
            "analysis_steps": f"Checked relevance and fluency ({token}).",
            "score": str(1 + pick % 5),
        }
        return json.dumps(body, ensure_ascii=False)
    if kind == "independence-judge":
        return _YES_NO[pick % 2]
    # generation triple
    zh = language == "zh"
    if task in ("multi-choice-single", "multi-choice-multi"):
        if zh:
            question = (
                f"{well.hanzi()}是哪项？A. {well.hanzi()} B. {well.hanzi()}"
                f" C. {well.hanzi()} D. {well.hanzi()}"
            )
        else:
            question = (
                f"Which of these is {well.word()}? A. {well.word()} B. {well.word()}"
                f" C. {well.word()} D. {well.word()}"
            )
        answer = _LETTERS[pick % 4]
    elif task == "nli":
        question = f"{well.hanzi()}是对的吗？" if zh else f"Is it so that {well.word()} can be {well.word()}?"
        answer = _NLI_ANSWERS[pick % 3]
    else:
        question = f"{well.hanzi()}是什么？" if zh else f"What is {well.word()} and what can it do for {well.word()}?"
        answer = f"{well.hanzi(3)}。" if zh else f"It is {well.word()} with {well.word()}."
    steps = (
        f"1. 阅读问题。2. 分析{well.hanzi()}。3. 给出答案。"
        if zh
        else f"1. Read the question. 2. Analyze {well.word()}. 3. Give the answer."
    )
    return json.dumps(
        {"question": question, "thinking_steps": steps, "answer": answer}, ensure_ascii=False
    )


def _infer_kind(prompt: str) -> str:
    if "analysis_steps" in prompt:
        return "inspection"
    if "thought_process" in prompt:
        return "logic-supplement"
    if "text dependency" in prompt or "文本依赖" in prompt:
        return "independence-judge"
    return "generation"


def _attempt_number(request_id: str) -> int:
    _, sep, suffix = request_id.rpartition("#a")
    if sep and suffix.isdigit():
        return int(suffix)
    return 0


class MockBackend(Backend):
    """Deterministic offline backend.

    The response is a pure function of (request_id, prompt digest), so any
    interleaving of concurrent requests reproduces the same texts. Fixture
    rules scripted on the profile override the built-in bodies and can inject
    faults for parser and retry tests.
    """

    def _complete(self, prompt: str, request_id: str, tags: dict) -> CompletionResult:
        digest = hashlib.sha256(
            (request_id + "\x00" + hashlib.sha256(prompt.encode("utf-8")).hexdigest()).encode("utf-8")
        ).hexdigest()
        kind = tags.get("kind") or _infer_kind(prompt)
        task = tags.get("task", "")
        language = tags.get("language", "en")

        rule = None
        effective = dict(tags)
        effective.setdefault("kind", kind)
        for candidate in self.profile.fixtures:
            if all(effective.get(k) == v for k, v in candidate.match.items()):
                rule = candidate
                break

        body = rule.body if rule and rule.body is not None else None
        if body is None:
            body = _default_body(kind, task, language, digest)
        fault = rule.fault if rule else None
        attempt = _attempt_number(request_id)
        if fault == "always-malformed" or (fault == "malformed-then-valid" and attempt == 0):
            text = f"Sorry, here is the result: question {digest[:6]} ,, not json"
        elif fault == "fenced":
            text = f"Sure, here you go:\n```json\n{body}\n```\nHope this helps."
        elif fault == "bad-score":
            text = json.dumps({"analysis_steps": "looks fine", "score": "7"})
        else:
            text = body
        return CompletionResult(
            text=text,
            input_tokens=_estimate_tokens(prompt),
            output_tokens=_estimate_tokens(text),
        )


def make_backend(profile: BackendProfile) -> Backend:
    if profile.kind == "mock":
        return MockBackend(profile)
    return HttpChatBackend(profile)


def load_fixture_rules(path) -> tuple[MockRule, ...]:
    """Read mock response scripts from JSONL of {match:{...}, body, fault?}."""
    rules = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            obj = json.loads(line)
            rules.append(
                MockRule(match=obj.get("match") or {}, body=obj.get("body"), fault=obj.get("fault"))
            )
    return tuple(rules)


def profile_from_dict(config: dict) -> BackendProfile:
    """Build a profile from one backend section of the run configuration."""
    sampling_cfg = config.get("sampling") or {}
    fixtures: tuple[MockRule, ...] = ()
    if config.get("fixtures"):
        fixtures = load_fixture_rules(config["fixtures"])
    price = config.get("price") or {}
    return BackendProfile(
        kind=config.get("kind", "mock"),
        model_name=config.get("model_name", "mock-model"),
        endpoint=config.get("endpoint", ""),
        sampling=SamplingParams(
            temperature=float(sampling_cfg.get("temperature", 0.7)),
            top_p=float(sampling_cfg.get("top_p", 0.95)),
            max_tokens=int(sampling_cfg.get("max_tokens", 1024)),
        ),
        max_retries=int(config.get("max_retries", 3)),
        timeout=float(config.get("timeout", 60.0)),
        price_per_input_token=price.get("per_input_token"),
        price_per_output_token=price.get("per_output_token"),
        api_key_env=config.get("api_key_env"),
        backoff_base=float(config.get("backoff_base", 0.5)),
        backoff_cap=float(config.get("backoff_cap", 8.0)),
        fixtures=fixtures,
    )


def map_bounded(fn, items, parallelism: int) -> list:
    """Apply ``fn`` over items with at most ``parallelism`` in flight.

    Results come back in input order regardless of completion order, which
    keeps downstream files deterministic.
    """
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))

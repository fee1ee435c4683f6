"""LLM re-ranking of retrieved candidates.

A candidate set is rendered into one of four prompt templates, sent to a
chat client at temperature 0, and the reply is parsed into segment ids.
Whatever the model says, the repair pipeline turns it into a valid
selection: a duplicate-free subset of the candidates of length
``min(k, len(candidates))``.
"""
from __future__ import annotations

import ast
import json
import logging
import os
import re
import threading
import time
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Protocol

import httpx

from .corpus import Requirement

logger = logging.getLogger(__name__)

CLOSED = "closed"
OPEN = "open"

SYSTEM_TEXT = "You are an expert auditor with perfect knowledge of the IFRS accounting standard."
_SYSTEM_PREFIX = f"System: {SYSTEM_TEXT} "

_QUESTION = (
    "Out of all document segments provided below which ones are the 5 most relevant "
    "for fulfilling the IFRS requirement? "
)
_CLOSED_TAIL = (
    "Your answer should only contain the ids of the relevant document segments. "
    "Example: ['1129', '1139','1159', '1161', '829']. "
    "Your answer needs to be machine readable. Do not add any additional text."
)
_OPEN_TAIL = (
    "Format your output complying to the following json schema: "
    "{'explanation': 'The most relevant document segments ...', "
    "'answer': ['1129', '1139','1159', '1161', '829']}. "
    "Ensure that 'answer' is its own key in the json schema. "
    "Your answer needs to be machine readable."
)
_EXPLAIN = "Explain for each requirement why you selected the 5 most relevant requirements. "
_ONE_SENTENCE = "Each should only be a sentence long. "
_SLOTS = "IFRS requirement: {requirement} document segments: {document} "

TEMPLATE_BODIES = {
    "A": _QUESTION + _SLOTS + _CLOSED_TAIL,
    "B": _SYSTEM_PREFIX + _QUESTION + "Think step by step. " + _SLOTS + _CLOSED_TAIL,
    "C": _SYSTEM_PREFIX + _QUESTION + _EXPLAIN + "Think step by step: " + _SLOTS + _OPEN_TAIL,
    "D": _SYSTEM_PREFIX + _QUESTION + _EXPLAIN + _ONE_SENTENCE + "Think step by step: " + _SLOTS + _OPEN_TAIL,
}

_PLACEHOLDER = re.compile(r"\{requirement\}|\{document\}")

DUPLICATES_REMOVED = "duplicates_removed"
FOREIGN_IDS_DROPPED = "foreign_ids_dropped"
PADDED_FROM_RETRIEVER = "padded_from_retriever"
PARSE_FALLBACK = "parse_fallback"


class RerankError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    output_format: str
    body: str

    def __post_init__(self):
        for slot in ("{requirement}", "{document}"):
            if self.body.count(slot) != 1:
                raise TemplateError(f"template {self.id!r} must contain {slot} exactly once")
        if self.output_format not in (CLOSED, OPEN):
            raise TemplateError(f"unknown output format {self.output_format!r}")


TEMPLATES = {
    tid: PromptTemplate(tid, CLOSED if tid in "AB" else OPEN, body)
    for tid, body in TEMPLATE_BODIES.items()
}


def get_template(template_id: str) -> PromptTemplate:
    try:
        return TEMPLATES[template_id]
    except KeyError:
        raise TemplateError(
            f"unknown template {template_id!r}; choose from {', '.join(TEMPLATES)}"
        ) from None


@dataclass(frozen=True)
class CandidateSet:
    requirement: Requirement
    candidates: tuple[tuple[str, str], ...]  # (segment_id, text) in retriever order

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(tuple(c) for c in self.candidates))
        if not self.candidates:
            raise ValueError("candidate set is empty")
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate candidate ids for requirement {self.requirement.id!r}")

    @property
    def ids(self) -> list[str]:
        return [sid for sid, _ in self.candidates]


@dataclass
class RerankResult:
    chosen: list[str]
    raw_response: str
    explanation: str | None = None
    repairs: list[str] = field(default_factory=list)


def render_document(cs: CandidateSet) -> str:
    return "\n".join(f"[{sid}] {text}" for sid, text in cs.candidates)


def render_prompt(template: PromptTemplate, cs: CandidateSet) -> str:
    values = {"{requirement}": cs.requirement.text, "{document}": render_document(cs)}
    # one pass, so placeholder-like text inside the inserted values stays literal
    return _PLACEHOLDER.sub(lambda m: values[m.group(0)], template.body)


def to_messages(prompt: str, supports_roles: bool = True) -> list[dict[str, str]]:
    """Chat messages for a rendered prompt, splitting off the system line if present."""
    if supports_roles and prompt.startswith(_SYSTEM_PREFIX):
        return [
            {"role": "system", "content": SYSTEM_TEXT},
            {"role": "user", "content": prompt[len(_SYSTEM_PREFIX):]},
        ]
    return [{"role": "user", "content": prompt}]


_QUOTED_LIST = re.compile(
    r"""\[\s*(?:(?:'[^'\n]*'|"[^"\n]*")\s*(?:,\s*(?:'[^'\n]*'|"[^"\n]*")\s*)*)?\]"""
)
_QUOTED_ITEM = re.compile(r"""'([^'\n]*)'|"([^"\n]*)\"""")


def parse_closed_response(text: str) -> list[str]:
    """Ids from the first bracketed list of quoted strings in ``text``."""
    m = _QUOTED_LIST.search(text)
    if m is None:
        raise ParseError("no bracketed list of quoted ids found")
    return [
        item.group(1) if item.group(1) is not None else item.group(2)
        for item in _QUOTED_ITEM.finditer(m.group(0))
    ]


def _json_objects(text: str) -> Iterable[object]:
    decoder = json.JSONDecoder()
    for start in (i for i, ch in enumerate(text) if ch == "{"):
        try:
            obj, _ = decoder.raw_decode(text, start)
        except ValueError:
            obj = _literal_object(text, start)
            if obj is None:
                continue
        yield obj


def _literal_object(text: str, start: int):
    # python-literal dicts with single quotes, as in the template's own example
    depth = 0
    for i in range(start, min(len(text), start + 200_000)):
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
            if depth == 0:
                try:
                    return ast.literal_eval(text[start : i + 1])
                except (ValueError, TypeError, SyntaxError, MemoryError, RecursionError):
                    return None
    return None


def parse_open_response(text: str) -> tuple[str, list[str]]:
    for obj in _json_objects(text):
        if not isinstance(obj, dict) or "explanation" not in obj:
            continue
        if "answer" not in obj:
            raise ParseError("object has no 'answer' key")
        answer = obj["answer"]
        if not isinstance(answer, list) or not all(isinstance(a, str) for a in answer):
            raise ParseError("'answer' must be a list of strings")
        explanation = obj["explanation"]
        if not isinstance(explanation, str):
            raise ParseError("'explanation' must be a string")
        return explanation, list(answer)
    raise ParseError("no JSON object with 'explanation' and 'answer' found")


def repair_selection(ids: Sequence[str], candidate_ids: Sequence[str], k: int) -> tuple[list[str], list[str]]:
    """Dedupe, drop foreign ids, truncate to k, pad from retriever order."""
    repairs: list[str] = []
    target = min(k, len(candidate_ids))
    allowed = set(candidate_ids)
    seen: set[str] = set()
    deduped = []
    for sid in ids:
        if sid in seen:
            if DUPLICATES_REMOVED not in repairs:
                repairs.append(DUPLICATES_REMOVED)
            continue
        seen.add(sid)
        deduped.append(sid)
    chosen = [sid for sid in deduped if sid in allowed]
    if len(chosen) < len(deduped):
        repairs.append(FOREIGN_IDS_DROPPED)
    chosen = chosen[:target]
    if len(chosen) < target:
        taken = set(chosen)
        chosen += [sid for sid in candidate_ids if sid not in taken][: target - len(chosen)]
        repairs.append(PADDED_FROM_RETRIEVER)
    return chosen, repairs


class ChatClient(Protocol):
    supports_roles: bool

    def complete(self, messages: list[dict[str, str]], temperature: float = 0.0) -> str: ...


def rerank(client: ChatClient, template: PromptTemplate, cs: CandidateSet, k: int = 5) -> RerankResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    prompt = render_prompt(template, cs)
    messages = to_messages(prompt, getattr(client, "supports_roles", True))
    raw = client.complete(messages, temperature=0.0)
    explanation = None
    try:
        if template.output_format == CLOSED:
            ids = parse_closed_response(raw)
        else:
            explanation, ids = parse_open_response(raw)
    except ParseError as exc:
        logger.debug("unparseable reply for %s (%s); using retriever order", cs.requirement.id, exc)
        return RerankResult(cs.ids[:k], raw, None, [PARSE_FALLBACK])
    chosen, repairs = repair_selection(ids, cs.ids, k)
    return RerankResult(chosen, raw, explanation, repairs)


class ScriptedChatClient:
    """Mock that replays fixed responses in order, cycling when exhausted."""

    supports_roles = True

    def __init__(self, responses: str | Sequence[str]):
        self.responses = [responses] if isinstance(responses, str) else list(responses)
        if not self.responses:
            raise ValueError("need at least one scripted response")
        self.calls: list[list[dict[str, str]]] = []
        self._lock = threading.Lock()

    def complete(self, messages, temperature=0.0):
        with self._lock:
            reply = self.responses[len(self.calls) % len(self.responses)]
            self.calls.append(messages)
        return reply


_CANDIDATE_LINE = re.compile(r"(?:^|\n|document segments: )\[([^\]\n]+)\] ")


class OracleChatClient:
    """Best-possible re-ranker for tests.

    Answers with the gold segments present among the candidates, in
    retriever order, padded up to ``k`` with the top non-gold candidates.
    Gold is keyed by requirement text, which is recovered from the prompt.
    """

    supports_roles = True

    def __init__(self, gold_by_text: Mapping[str, Iterable[str]], k: int = 5):
        self.gold_by_text = {text: frozenset(g) for text, g in gold_by_text.items()}
        self.k = k

    @classmethod
    def from_corpus(cls, requirements: Iterable[Requirement], annotations: Mapping[str, Iterable[str]], k: int = 5):
        gold: dict[str, set[str]] = {}
        for req in requirements:
            if req.id in annotations:
                gold.setdefault(req.text, set()).update(annotations[req.id])
        return cls(gold, k)

    def _gold_for(self, prompt: str) -> frozenset[str]:
        best = None
        for text in self.gold_by_text:
            if f"IFRS requirement: {text} document segments: " in prompt:
                if best is None or len(text) > len(best):
                    best = text
        return self.gold_by_text[best] if best is not None else frozenset()

    def complete(self, messages, temperature=0.0):
        prompt = "\n".join(m["content"] for m in messages)
        body = prompt.split("document segments: ", 1)[-1]
        candidates = _CANDIDATE_LINE.findall("document segments: " + body)
        gold = self._gold_for(prompt)
        hits = [c for c in candidates if c in gold]
        pads = [c for c in candidates if c not in gold]
        answer = hits + pads[: max(0, self.k - len(hits))]
        if "json schema" in prompt:
            return json.dumps({"explanation": "gold segments first", "answer": answer})
        return repr(answer)


class RemoteChatClient:
    """Chat-completion client over HTTP.

    Sends ``{model, temperature, messages}`` and reads
    ``choices[0].message.content``. Retries with exponential backoff and
    limits concurrent requests with a semaphore.
    """

    supports_roles = True

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "AUDITMATCH_CHAT_API_KEY",
        attempts: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 2,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.attempts = attempts
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def complete(self, messages, temperature=0.0):
        payload = {"model": self.model, "temperature": temperature, "messages": messages}
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_exc: Exception | None = None
        with self._slots:
            for attempt in range(self.attempts):
                try:
                    resp = self._client.post(self.endpoint, json=payload, headers=headers)
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"]
                except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
                    last_exc = exc
                    if attempt + 1 < self.attempts:
                        delay = self.backoff * 2**attempt
                        logger.warning("chat request failed (%s); retrying in %.1fs", exc, delay)
                        time.sleep(delay)
        raise RerankError(f"chat request failed after {self.attempts} attempts: {last_exc}")

"""Chat/vision backends: HTTP client, offline deterministic mock, replay.

The hosted models are interchangeable; everything model-specific stays
behind the ChatBackend contract. The offline backend answers any pipeline
prompt deterministically so the full system runs with zero network access,
and the replay backend records/replays real responses keyed by prompt hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import requests

from .errors import BackendUnavailableError

CHAT_URL_ENV = "OBS_CHAT_URL"
CHAT_KEY_ENV = "OBS_CHAT_KEY"
RETRIEVER_URL_ENV = "OBS_RETRIEVER_URL"
REASONER_URL_ENV = "OBS_REASONER_URL"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    image_b64: str | None = None


@dataclass(frozen=True)
class TokenUsage:
    prompt: int = 0
    completion: int = 0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(self.prompt + other.prompt, self.completion + other.completion)

    @property
    def total(self) -> int:
        return self.prompt + self.completion

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "completion": self.completion}

    @classmethod
    def from_json(cls, doc: Mapping) -> "TokenUsage":
        return cls(prompt=int(doc.get("prompt", 0)), completion=int(doc.get("completion", 0)))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    model: str | None = None

    def canonical_json(self) -> str:
        doc = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": m.role, "content": m.content, "image_b64": m.image_b64}
                for m in self.messages
            ],
        }
        return json.dumps(doc, ensure_ascii=False, sort_keys=True)

    def prompt_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def text(self) -> str:
        return "\n".join(m.content for m in self.messages if m.content)


@dataclass(frozen=True)
class ChatResponse:
    content: str
    usage: TokenUsage = field(default_factory=TokenUsage)


class ChatBackend(ABC):
    """Abstract chat-completion backend."""

    name: str
    supports_images: bool

    @abstractmethod
    def complete(self, request: ChatRequest) -> ChatResponse: ...


def _approx_tokens(text: str) -> int:
    # deterministic stand-in for a tokenizer; only stability matters
    return max(1, (len(text) + 3) // 4)


def _request_tokens(request: ChatRequest) -> int:
    n = 0
    for m in request.messages:
        n += _approx_tokens(m.content) if m.content else 0
        if m.image_b64:
            n += 85
    return n


class HttpChatBackend(ChatBackend):
    """Client for the chat wire protocol.

    POST ``{model, temperature, messages:[{role, content|image_b64}]}``;
    the service replies ``{content, usage:{prompt_tokens, completion_tokens}}``.
    """

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        model: str | None = None,
        name: str | None = None,
        supports_images: bool = True,
        timeout: float = 120.0,
        max_in_flight: int = 4,
    ):
        self._url = url
        self._api_key = api_key
        self.model = model
        self.name = name or f"http:{url}"
        self.supports_images = supports_images
        self._timeout = timeout
        self._gate = threading.Semaphore(max_in_flight)

    def complete(self, request: ChatRequest) -> ChatResponse:
        messages = []
        for m in request.messages:
            doc: dict = {"role": m.role}
            if m.content:
                doc["content"] = m.content
            if m.image_b64:
                doc["image_b64"] = m.image_b64
            messages.append(doc)
        body = {
            "model": request.model or self.model,
            "temperature": request.temperature,
            "messages": messages,
        }
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            with self._gate:
                resp = requests.post(self._url, json=body, headers=headers, timeout=self._timeout)
        except requests.RequestException as exc:
            raise BackendUnavailableError(f"chat backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise BackendUnavailableError(f"chat backend returned HTTP {resp.status_code}")
        try:
            doc = resp.json()
            content = doc["content"]
        except (ValueError, KeyError) as exc:
            raise BackendUnavailableError(f"malformed chat response: {exc}") from exc
        usage = doc.get("usage", {})
        return ChatResponse(
            content=content,
            usage=TokenUsage(
                prompt=int(usage.get("prompt_tokens", 0)),
                completion=int(usage.get("completion_tokens", 0)),
            ),
        )


class ScriptedChatBackend(ChatBackend):
    """Replies from a fixed queue; records every request. Test double."""

    def __init__(
        self,
        replies: Iterable[str] = (),
        name: str = "scripted",
        supports_images: bool = True,
    ):
        self._replies = list(replies)
        self.name = name
        self.supports_images = supports_images
        self.requests: list[ChatRequest] = []

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        if not self._replies:
            raise BackendUnavailableError(f"scripted backend {self.name!r} ran out of replies")
        content = self._replies.pop(0)
        return ChatResponse(
            content=content,
            usage=TokenUsage(prompt=_request_tokens(request), completion=_approx_tokens(content)),
        )


_PREDICTION_LINE_RE = re.compile(r"(?m)^- (.+?) \(distance=")

_TYPE_CHOICES = ("ideographic", "pictographic", "phono-semantic")


class OfflineChatBackend(ChatBackend):
    """Deterministic structured replies for any pipeline prompt.

    Inspects the prompt for the instructed response grammar (tool-call plan,
    interpretation, type judgment, or judge score) and answers in that
    grammar as a pure function of the prompt bytes. Lets every stage of the
    pipeline run offline and reproducibly.
    """

    def __init__(self, name: str = "offline-mock", supports_images: bool = True):
        self.name = name
        self.supports_images = supports_images
        self.requests: list[ChatRequest] = []

    def _hash(self, text: str) -> int:
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def complete(self, request: ChatRequest) -> ChatResponse:
        self.requests.append(request)
        prompt = request.text
        h = self._hash(prompt)
        labels = _PREDICTION_LINE_RE.findall(prompt)
        if "CALL" in prompt and "component_explanation" in prompt:
            lines = []
            for label in labels[:3]:
                lines.append(f"CALL component_explanation {label}")
                lines.append(f"CALL characters_by_component {label}")
            content = "\n".join(lines) if lines else "CALL component_explanation unknown"
        elif "INTERPRETATION:" in prompt:
            t = _TYPE_CHOICES[h % 3]
            parts = ", ".join(labels) if labels else "its strokes"
            content = (
                f"TYPE: {t}\n"
                f"REASON: The character joins {parts} into one scene (trace {h % 9973}).\n"
                f"INTERPRETATION: A character built from {parts}; "
                f"reading variant {h % 997} of the combined senses."
            )
        elif "TYPE:" in prompt:
            t = _TYPE_CHOICES[h % 3]
            parts = ", ".join(labels) if labels else "its strokes"
            content = f"TYPE: {t}\nREASON: Component cues {parts} point to this formation (trace {h % 9973})."
        elif "Score:" in prompt:
            content = f"Score: {(h % 101) / 100:.2f}"
        else:
            content = f"ACK {h % 100000}"
        return ChatResponse(
            content=content,
            usage=TokenUsage(prompt=_request_tokens(request), completion=_approx_tokens(content)),
        )


class ReplayChatBackend(ChatBackend):
    """Canned request->response fixtures keyed by prompt hash.

    In record mode, misses are forwarded to ``inner`` and the response is
    persisted; otherwise a miss raises BackendUnavailableError. Fixture
    files are plain JSON mapping prompt hashes to responses.
    """

    def __init__(
        self,
        path: str | Path,
        inner: ChatBackend | None = None,
        record: bool = False,
        name: str | None = None,
        supports_images: bool = True,
    ):
        self._path = Path(path)
        self._inner = inner
        self._record = record
        self.name = name or (inner.name if inner else "replay")
        self.supports_images = supports_images if inner is None else inner.supports_images
        self._lock = threading.Lock()
        if self._path.exists():
            self._fixtures: dict = json.loads(self._path.read_text(encoding="utf-8"))
        else:
            self._fixtures = {}

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.prompt_hash()
        with self._lock:
            hit = self._fixtures.get(key)
        if hit is not None:
            return ChatResponse(content=hit["content"], usage=TokenUsage.from_json(hit.get("usage", {})))
        if self._record and self._inner is not None:
            resp = self._inner.complete(request)
            with self._lock:
                self._fixtures[key] = {
                    "content": resp.content,
                    "usage": resp.usage.to_json(),
                }
                self._path.write_text(
                    json.dumps(self._fixtures, ensure_ascii=False, indent=2, sort_keys=True),
                    encoding="utf-8",
                )
            return resp
        raise BackendUnavailableError(f"no recorded response for prompt hash {key[:12]}")


def backend_from_env(role: str | None = None, supports_images: bool = True) -> ChatBackend | None:
    """Build an HTTP backend from the environment, or None if unconfigured.

    ``role`` may be ``retriever`` or ``reasoner`` to honour the per-agent
    URL overrides; both fall back to the shared chat endpoint.
    """
    url = ""
    if role == "retriever":
        url = os.environ.get(RETRIEVER_URL_ENV, "").strip()
    elif role == "reasoner":
        url = os.environ.get(REASONER_URL_ENV, "").strip()
    if not url:
        url = os.environ.get(CHAT_URL_ENV, "").strip()
    if not url:
        return None
    return HttpChatBackend(
        url,
        api_key=os.environ.get(CHAT_KEY_ENV) or None,
        supports_images=supports_images,
    )

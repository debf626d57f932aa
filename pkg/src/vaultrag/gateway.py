"""Clients for the embedder, reranker, and chat model services.

Remote variants speak an OpenAI-compatible HTTP surface (the reranker uses a
minimal ``{query, documents[]} -> {scores[]}`` contract since rerank routes
differ between hosts). Each has a deterministic local stub so the whole
pipeline runs and tests without any model service:

* :class:`HashingEmbedder` seeded feature hashing of word tokens,
* :class:`JaccardReranker` token-overlap scoring,
* :class:`ScriptedChatModel` replays a canned list of assistant turns.

Stub and remote implementations are interchangeable behind the same
interface. Transient upstream failures retry with exponential backoff;
rejections do not.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import httpx
import numpy as np

from .errors import ContextOverflow, UpstreamRejected, UpstreamUnavailable

_RETRY_ATTEMPTS = 3
_RETRY_BASE_DELAY = 0.25

_TOKEN_RE = re.compile(r"\w+")


# ---------------------------------------------------------------------------
# message and request types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolCall:
    call_id: str
    name: str
    arguments: dict


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    parameters: dict


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCall, ...] = ()
    tool_call_id: Optional[str] = None

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.tool_calls and self.role != "assistant":
            raise ValueError("tool_calls allowed on assistant messages only")
        if self.tool_call_id is not None and self.role != "tool":
            raise ValueError("tool_call_id allowed on tool messages only")
        if not isinstance(self.tool_calls, tuple):
            object.__setattr__(self, "tool_calls", tuple(self.tool_calls))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[ChatMessage, ...]
    tools: tuple[ToolSpec, ...] = ()
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if not isinstance(self.messages, tuple):
            object.__setattr__(self, "messages", tuple(self.messages))
        if not isinstance(self.tools, tuple):
            object.__setattr__(self, "tools", tuple(self.tools))


@dataclass(frozen=True)
class RerankRequest:
    query: str
    candidates: tuple[str, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidates must be non-empty")
        if not isinstance(self.candidates, tuple):
            object.__setattr__(self, "candidates", tuple(self.candidates))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmbedderConfig:
    endpoint_url: str = ""
    model: str = "Qwen3-Embedding-0.6B"
    dim: int = 1024
    timeout: float = 30.0
    max_batch: int = 64

    @classmethod
    def from_env(cls, env=os.environ) -> "EmbedderConfig":
        return cls(
            endpoint_url=env.get("EMBED_URL", ""),
            model=env.get("EMBED_MODEL", cls.model),
        )


@dataclass(frozen=True)
class RerankerConfig:
    endpoint_url: str = ""
    model: str = "rerank"
    timeout: float = 30.0

    @classmethod
    def from_env(cls, env=os.environ) -> "RerankerConfig":
        return cls(
            endpoint_url=env.get("RERANK_URL", ""),
            model=env.get("RERANK_MODEL", cls.model),
        )


@dataclass(frozen=True)
class ChatConfig:
    endpoint_url: str = ""
    model: str = "chat"
    timeout: float = 120.0

    @classmethod
    def from_env(cls, env=os.environ) -> "ChatConfig":
        return cls(
            endpoint_url=env.get("LLM_URL", ""),
            model=env.get("LLM_MODEL", cls.model),
        )


class Embedder(Protocol):
    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class Reranker(Protocol):
    def rerank(self, req: RerankRequest) -> list[float]: ...


class ChatModel(Protocol):
    def chat_complete(self, req: ChatRequest) -> ChatMessage: ...


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _with_retries(fn: Callable, sleep: Callable[[float], None] = time.sleep):
    """Retry only transient failures; rejections pass straight through."""
    for attempt in range(_RETRY_ATTEMPTS):
        try:
            return fn()
        except UpstreamUnavailable:
            if attempt == _RETRY_ATTEMPTS - 1:
                raise
            sleep(_RETRY_BASE_DELAY * (2**attempt))


def _join(base: str, path: str) -> str:
    base = base.rstrip("/")
    if base.endswith(path):
        return base
    return base + path


def _post_json(client: httpx.Client, url: str, body: dict) -> dict:
    try:
        resp = client.post(url, json=body)
    except httpx.TransportError as exc:
        raise UpstreamUnavailable(str(exc)) from exc
    if resp.status_code >= 500:
        raise UpstreamUnavailable(f"{url} -> {resp.status_code}")
    if resp.status_code >= 400:
        text = resp.text
        if resp.status_code == 400 and "context length" in text.lower():
            raise ContextOverflow(text)
        raise UpstreamRejected(f"{url} -> {resp.status_code}: {text}", status=resp.status_code)
    return resp.json()


def _tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float32)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("cannot normalize zero vector")
    return vec / norm


# ---------------------------------------------------------------------------
# remote clients
# ---------------------------------------------------------------------------


class HttpEmbedder:
    def __init__(self, config: EmbedderConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        if any(not t for t in texts):
            raise UpstreamRejected("empty text in embed batch", status=None)
        url = _join(self.config.endpoint_url, "/v1/embeddings")
        out: list[np.ndarray] = []
        for start in range(0, len(texts), self.config.max_batch):
            batch = list(texts[start : start + self.config.max_batch])
            body = {"model": self.config.model, "input": batch}
            data = _with_retries(lambda: _post_json(self._client, url, body), self._sleep)
            items = sorted(data["data"], key=lambda item: item["index"])
            if len(items) != len(batch):
                raise UpstreamRejected(
                    f"expected {len(batch)} embeddings, got {len(items)}", status=None
                )
            out.extend(_normalize(np.asarray(item["embedding"])) for item in items)
        return out


class HttpReranker:
    def __init__(self, config: RerankerConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def rerank(self, req: RerankRequest) -> list[float]:
        url = _join(self.config.endpoint_url, "/rerank")
        body = {"model": self.config.model, "query": req.query, "documents": list(req.candidates)}
        data = _with_retries(lambda: _post_json(self._client, url, body), self._sleep)
        scores = [float(s) for s in data["scores"]]
        if len(scores) != len(req.candidates):
            raise UpstreamRejected(
                f"expected {len(req.candidates)} scores, got {len(scores)}", status=None
            )
        if any(not np.isfinite(s) or not 0.0 <= s <= 1.0 for s in scores):
            raise UpstreamRejected("scores outside [0, 1]", status=None)
        return scores


class HttpChatModel:
    def __init__(self, config: ChatConfig, client: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._sleep = sleep

    def chat_complete(self, req: ChatRequest) -> ChatMessage:
        url = _join(self.config.endpoint_url, "/v1/chat/completions")
        body = {
            "model": self.config.model,
            "messages": [_wire_message(m) for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.tools:
            body["tools"] = [
                {
                    "type": "function",
                    "function": {
                        "name": t.name,
                        "description": t.description,
                        "parameters": t.parameters,
                    },
                }
                for t in req.tools
            ]
        data = _with_retries(lambda: _post_json(self._client, url, body), self._sleep)
        try:
            message = data["choices"][0]["message"]
        except (KeyError, IndexError) as exc:
            raise UpstreamRejected(f"malformed completion: {exc}", status=None) from exc
        return _parse_wire_message(message)


def _wire_message(msg: ChatMessage) -> dict:
    out: dict = {"role": msg.role, "content": msg.content}
    if msg.tool_calls:
        out["tool_calls"] = [
            {
                "id": c.call_id,
                "type": "function",
                "function": {"name": c.name, "arguments": json.dumps(c.arguments, ensure_ascii=False)},
            }
            for c in msg.tool_calls
        ]
    if msg.tool_call_id is not None:
        out["tool_call_id"] = msg.tool_call_id
    return out


def _parse_wire_message(message: dict) -> ChatMessage:
    calls = []
    for call in message.get("tool_calls") or ():
        fn = call.get("function", {})
        raw_args = fn.get("arguments", "{}")
        try:
            args = json.loads(raw_args) if isinstance(raw_args, str) else dict(raw_args)
        except ValueError:
            args = {"_raw": raw_args}
        calls.append(ToolCall(call.get("id", ""), fn.get("name", ""), args))
    return ChatMessage(
        role="assistant",
        content=message.get("content") or "",
        tool_calls=tuple(calls),
    )


# ---------------------------------------------------------------------------
# deterministic stubs
# ---------------------------------------------------------------------------


class HashingEmbedder:
    """Feature-hashes word tokens into a fixed dimension, L2-normalized.

    Same text always maps to the same unit vector; shared tokens pull
    vectors together, which is enough signal for ranking tests.
    """

    def __init__(self, dim: int = 1024, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _bucket(self, token: str) -> tuple[int, float]:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % self.dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        return bucket, sign

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        if any(not t for t in texts):
            raise UpstreamRejected("empty text in embed batch", status=None)
        out = []
        for text in texts:
            vec = np.zeros(self.dim, dtype=np.float64)
            for token in _tokens(text):
                bucket, sign = self._bucket(token)
                vec[bucket] += sign
            if not vec.any():
                # No word tokens, or all buckets cancelled: fall back to
                # hashing the raw text so the vector is still nonzero.
                bucket, _ = self._bucket(f"raw:{text}")
                vec[bucket] = 1.0
            out.append(_normalize(vec))
        return out


class JaccardReranker:
    """Token-overlap score; equal token sets give 1.0, disjoint give 0.0."""

    def rerank(self, req: RerankRequest) -> list[float]:
        query_tokens = set(_tokens(req.query))
        scores = []
        for candidate in req.candidates:
            cand_tokens = set(_tokens(candidate))
            union = query_tokens | cand_tokens
            if not union:
                scores.append(1.0)
            else:
                scores.append(len(query_tokens & cand_tokens) / len(union))
        return scores


@dataclass
class ScriptedChatModel:
    """Replays a fixed list of assistant turns; records every request so
    tests can assert what the model was offered."""

    turns: list[ChatMessage] = field(default_factory=list)
    requests: list[ChatRequest] = field(default_factory=list)
    _cursor: int = 0

    def chat_complete(self, req: ChatRequest) -> ChatMessage:
        if not req.messages:
            raise ValueError("messages must be non-empty")
        self.requests.append(req)
        if self._cursor >= len(self.turns):
            raise UpstreamRejected("script exhausted", status=None)
        turn = self.turns[self._cursor]
        self._cursor += 1
        return turn

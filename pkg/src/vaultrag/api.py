"""HTTP service tying the pieces together: bearer auth, record CRUD,
semantic search, the chat agent, and sync status.

`create_app` wires a repository, vector index, retrieval workers, and agent
into one FastAPI app. Model backends come from environment configuration;
without configured endpoints the app falls back to deterministic local
stubs for embedding/reranking and reports the chat model as unavailable.
"""

from __future__ import annotations

import base64
import binascii
import json
import logging
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from typing import Optional

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .agent import Agent, AgentConfig
from .chunking import ChunkingConfig
from .errors import (
    AnswerFormatExhausted,
    ContextOverflow,
    DuplicateId,
    DuplicateIdentifier,
    EmbedderUnavailable,
    EmptyQuery,
    Forbidden,
    InvalidObjectType,
    LlmUnavailable,
    MalformedJson,
    NotFound,
    UnknownUser,
    UpstreamRejected,
    UpstreamUnavailable,
    VaultError,
)
from .fixtures import BUILTIN_CORPORA, install, load_fixture
from .gateway import (
    ChatConfig,
    ChatMessage,
    ChatRequest,
    EmbedderConfig,
    HashingEmbedder,
    HttpChatModel,
    HttpEmbedder,
    HttpReranker,
    JaccardReranker,
    RerankerConfig,
)
from .hnsw import HnswIndex, HnswParams
from .repository import MediaKind, Repository
from .retrieval import RetrievalService, SearchParams

logger = logging.getLogger("vaultrag.api")

_ERROR_STATUS = (
    (NotFound, 404),
    (Forbidden, 403),
    (UnknownUser, 401),
    (DuplicateIdentifier, 409),
    (DuplicateId, 409),
    (EmbedderUnavailable, 503),
    (LlmUnavailable, 502),
    (ContextOverflow, 502),
    (UpstreamRejected, 502),
    (UpstreamUnavailable, 502),
    (InvalidObjectType, 400),
    (EmptyQuery, 400),
    (MalformedJson, 400),
)


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    instance_url: str = ""
    fixture: Optional[str] = None  # builtin corpus name or NDJSON path
    tokens: dict = field(default_factory=dict)  # user_id -> bearer token
    dim: int = 1024
    hnsw: Optional[HnswParams] = None
    chunking: Optional[ChunkingConfig] = None
    default_k: int = 50
    default_n: int = 8
    max_tool_calls: int = 5
    workers: int = 2
    cors_origins: tuple = ("*",)

    def __post_init__(self):
        if not 1 <= self.default_n <= self.default_k:
            raise ValueError("default_n must satisfy 1 <= n <= k")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.dim < 1:
            raise ValueError("dim must be positive")


class _UnconfiguredChatModel:
    """Stands in when no chat endpoint is configured; /api/chat reports 502."""

    def chat_complete(self, req: ChatRequest) -> ChatMessage:
        raise UpstreamUnavailable("no chat model configured (set LLM_URL)")


class SearchBody(BaseModel):
    query: str
    k: Optional[int] = None
    n: Optional[int] = None


class ChatMessageBody(BaseModel):
    role: str
    content: str


class ChatBody(BaseModel):
    messages: list[ChatMessageBody]


class RecordBody(BaseModel):
    title: str
    identifier: str
    description: str = ""
    extras: dict = Field(default_factory=dict)


class FileBody(BaseModel):
    name: str
    media_kind: str
    content_base64: str


def _default_embedder(config: ServiceConfig):
    env = EmbedderConfig.from_env()
    if env.endpoint_url:
        return HttpEmbedder(env)
    return HashingEmbedder(dim=config.dim)


def _default_reranker():
    env = RerankerConfig.from_env()
    if env.endpoint_url:
        return HttpReranker(env)
    return JaccardReranker()


def _default_chat_model():
    env = ChatConfig.from_env()
    if env.endpoint_url:
        return HttpChatModel(env)
    return _UnconfiguredChatModel()


def _load_named_fixture(repo: Repository, name: str):
    if name in BUILTIN_CORPORA:
        return install(repo, BUILTIN_CORPORA[name]())
    return load_fixture(repo, name)


def _message_dict(message: ChatMessage) -> dict:
    return {
        "role": message.role,
        "content": message.content,
        "tool_calls": [
            {"name": c.name, "arguments": c.arguments} for c in message.tool_calls
        ],
    }


def create_app(
    config: Optional[ServiceConfig] = None,
    *,
    repo: Optional[Repository] = None,
    embedder=None,
    reranker=None,
    chat_model=None,
) -> FastAPI:
    config = config or ServiceConfig()
    repo = repo or Repository()
    embedder = embedder or _default_embedder(config)
    reranker = reranker or _default_reranker()
    chat_model = chat_model or _default_chat_model()

    index = HnswIndex(config.hnsw or HnswParams(dim=config.dim))
    service = RetrievalService(
        repo,
        index,
        embedder,
        reranker,
        chunking=config.chunking,
        workers=config.workers,
    )
    instance_url = config.instance_url or f"http://{config.host}:{config.port}"
    agent = Agent(
        repo,
        service,
        chat_model,
        instance_url=instance_url,
        config=AgentConfig(max_tool_calls=config.max_tool_calls),
    )

    for user_id, token in config.tokens.items():
        repo.add_user(user_id, bearer_token=token)
    fixture_summary = None
    if config.fixture:
        fixture_summary = _load_named_fixture(repo, config.fixture)
        logger.info("fixture %s loaded: %s", config.fixture, fixture_summary)
    service.bootstrap()
    repo.add_listener(service.enqueue)
    service.start()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        service.wait_idle(timeout=10.0)
        service.stop()

    app = FastAPI(title="vaultrag", lifespan=lifespan)
    app.state.repo = repo
    app.state.index = index
    app.state.service = service
    app.state.agent = agent
    app.state.config = config
    app.state.fixture_summary = fixture_summary

    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(config.cors_origins),
        allow_methods=["*"],
        allow_headers=["Authorization", "Content-Type"],
    )

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        started = time.perf_counter()
        response = await call_next(request)
        logger.info(
            "%s %s user=%s status=%d duration_ms=%.1f",
            request.method,
            request.url.path,
            getattr(request.state, "user", "-"),
            response.status_code,
            (time.perf_counter() - started) * 1000.0,
        )
        return response

    @app.exception_handler(VaultError)
    async def vault_error_handler(request: Request, exc: VaultError):
        for cls, status in _ERROR_STATUS:
            if isinstance(exc, cls):
                return JSONResponse({"detail": str(exc)}, status_code=status)
        return JSONResponse({"detail": str(exc)}, status_code=400)

    def require_user(request: Request) -> str:
        header = request.headers.get("authorization", "")
        scheme, _, token = header.partition(" ")
        if scheme.lower() != "bearer" or not token.strip():
            raise HTTPException(status_code=401, detail="missing bearer token")
        user = repo.user_for_token(token.strip())
        if user is None:
            raise HTTPException(status_code=401, detail="invalid bearer token")
        request.state.user = user
        return user

    # ------------------------------------------------------------------
    # search and chat
    # ------------------------------------------------------------------

    @app.post("/api/search")
    def search(body: SearchBody, user: str = Depends(require_user)):
        try:
            params = SearchParams(
                query=body.query,
                k=body.k if body.k is not None else config.default_k,
                n=body.n if body.n is not None else config.default_n,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        outcome = service.semantic_search(params, user)
        return {
            "results": [
                {
                    "record_id": c.record_id,
                    "from_metadata": c.from_metadata,
                    "file_name": c.file_name,
                    "text": c.text,
                    "first_stage_score": c.first_stage_score,
                    "rerank_score": c.rerank_score,
                }
                for c in outcome.results
            ],
            "degraded": outcome.degraded,
        }

    @app.post("/api/chat")
    def chat(body: ChatBody, debug: int = 0, user: str = Depends(require_user)):
        history = []
        for m in body.messages:
            if m.role not in ("user", "assistant"):
                raise HTTPException(
                    status_code=400,
                    detail=f"role {m.role!r} not allowed in client history",
                )
            history.append(ChatMessage(role=m.role, content=m.content))
        if not history or history[-1].role != "user":
            raise HTTPException(
                status_code=400, detail="history must end with a user message"
            )
        try:
            result = agent.run(history, user)
            answer = result.answer
            trace = result.history
            exhausted = False
        except AnswerFormatExhausted as exc:
            answer = exc.answer
            trace = ()
            exhausted = True
        payload = {
            "answer": answer.answer,
            "sources": [
                {"record_id": s.record_id, "specifier": s.specifier}
                for s in answer.sources
            ],
        }
        if exhausted:
            payload["format_exhausted"] = True
        if debug:
            payload["trace"] = [_message_dict(m) for m in trace]
        return payload

    # ------------------------------------------------------------------
    # record CRUD
    # ------------------------------------------------------------------

    @app.post("/api/records", status_code=201)
    def create_record(body: RecordBody, user: str = Depends(require_user)):
        record = repo.create_record(
            title=body.title,
            identifier=body.identifier,
            extras=body.extras,
            owner=user,
            description=body.description,
        )
        return {
            "record_id": record.record_id,
            "identifier": record.identifier,
            "title": record.title,
        }

    @app.get("/api/records")
    def list_records(user: str = Depends(require_user)):
        allowed = repo.accessible_record_ids(user)
        rows = [
            {"record_id": r.record_id, "identifier": r.identifier, "title": r.title}
            for r in repo.records()
            if r.record_id in allowed
        ]
        rows.sort(key=lambda r: r["record_id"])
        return {"records": rows}

    @app.get("/api/records/{record_id}")
    def get_record(record_id: int, user: str = Depends(require_user)):
        return json.loads(repo.get_metadata(record_id, user))

    @app.delete("/api/records/{record_id}", status_code=204)
    def delete_record(record_id: int, user: str = Depends(require_user)):
        repo.delete_record(record_id, user)
        return Response(status_code=204)

    @app.post("/api/records/{record_id}/files", status_code=201)
    def upload_file(
        record_id: int, body: FileBody, user: str = Depends(require_user)
    ):
        try:
            kind = MediaKind(body.media_kind)
        except ValueError:
            raise HTTPException(
                status_code=400, detail=f"unknown media kind {body.media_kind!r}"
            )
        try:
            content = base64.b64decode(body.content_base64, validate=True)
        except (binascii.Error, ValueError):
            raise HTTPException(status_code=400, detail="content_base64 is not valid base64")
        entry = repo.upload_file(record_id, body.name, kind, content, caller=user)
        return {"name": entry.file_name, "size_bytes": entry.size_bytes}

    @app.get("/api/records/{record_id}/links")
    def record_links(record_id: int, user: str = Depends(require_user)):
        links = repo.get_connections(record_id, "record", user)
        return {
            "links": [
                {
                    "from_id": link.from_id,
                    "from_type": link.from_type.value,
                    "to_id": link.to_id,
                    "to_type": link.to_type.value,
                    "annotation": link.annotation,
                }
                for link in links
            ]
        }

    @app.get("/api/sync/status")
    def sync_status(user: str = Depends(require_user)):
        return service.sync_status()

    return app

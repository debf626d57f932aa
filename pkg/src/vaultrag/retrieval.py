"""Semantic search pipeline and background vector-table synchronization.

Search is a three-stage pipeline: embed the query, k-NN over the index
restricted to the caller's accessible records, rerank the candidates, keep
the best n. A reranker outage degrades to first-stage order instead of
failing the search; an embedder outage cannot be degraded past and is an
error.

Sync keeps the vector table following the repository. Each repository event
names one subject (a record's metadata, or one file). Processing a subject
re-extracts, re-chunks, re-embeds, then atomically swaps that subject's rows
in the index: embeddings are computed before anything is deleted, so a
failure leaves the old rows in place. Queued events are coalesced per
subject (a newer event supersedes an older queued one) and workers never
run two events for the same record concurrently, which preserves per-record
order.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass
from typing import Optional

from .chunking import ChunkingConfig, RawDocument, chunk_document
from .errors import (
    EmbedderUnavailable,
    EmptyQuery,
    ExtractionFailed,
    UpstreamRejected,
    UpstreamUnavailable,
)
from .gateway import Embedder, Reranker, RerankRequest
from .hnsw import ChunkRow, HnswIndex
from .repository import MediaKind, Repository, SyncEvent, SyncKind

logger = logging.getLogger(__name__)

_DEFAULT_WORKERS = 2
_DEFAULT_MAX_RETRIES = 5


@dataclass(frozen=True)
class SearchParams:
    query: str
    k: int = 50
    n: int = 8

    def __post_init__(self):
        if not (1 <= self.n <= self.k):
            raise ValueError("require 1 <= n <= k")


@dataclass(frozen=True)
class ScoredChunk:
    id: int
    record_id: int
    from_metadata: bool
    file_name: Optional[str]
    text: str
    first_stage_score: float
    rerank_score: Optional[float]


@dataclass(frozen=True)
class SearchOutcome:
    results: list[ScoredChunk]
    degraded: bool


@dataclass(frozen=True)
class SyncOutcome:
    chunks_written: int
    chunks_deleted: int
    skipped_reason: Optional[str] = None


def vector_table_signature(index: HnswIndex) -> set[tuple[int, str, int, str]]:
    """Set of (record_id, subject, ordinal, text) over all live rows.

    Chunk ids increase in write order within a subject, so the ordinal is
    the id rank inside its (record, subject) group. Two tables with the same
    signature hold the same content regardless of id assignment.
    """
    groups: dict[tuple[int, str], list[tuple[int, str]]] = {}
    for row_id in index.ids():
        row = index.get_row(row_id)
        subject = "metadata" if row.from_metadata else f"file:{row.file_name}"
        groups.setdefault((row.record_id, subject), []).append((row.id, row.text))
    signature = set()
    for (record_id, subject), rows in groups.items():
        rows.sort()
        for ordinal, (_, text) in enumerate(rows):
            signature.add((record_id, subject, ordinal, text))
    return signature


class RetrievalService:
    """Owns the vector table: search on one side, sync workers on the other."""

    def __init__(
        self,
        repo: Repository,
        index: HnswIndex,
        embedder: Embedder,
        reranker: Reranker,
        chunking: ChunkingConfig | None = None,
        workers: int = _DEFAULT_WORKERS,
        max_retries: int = _DEFAULT_MAX_RETRIES,
    ):
        self._repo = repo
        self._index = index
        self._embedder = embedder
        self._reranker = reranker
        self._chunking = chunking or ChunkingConfig()
        self._worker_count = workers
        self._max_retries = max_retries

        self._cond = threading.Condition()
        self._pending: dict[tuple[int, str], SyncEvent] = {}
        self._retries: dict[tuple[int, str], int] = {}
        self._failed: dict[tuple[int, str], str] = {}
        self._inflight: set[int] = set()
        self._last_sequence: dict[int, int] = {}
        self._stopped = False
        self._threads: list[threading.Thread] = []

        self._chunk_counter = itertools.count(1)
        self._table_lock = threading.Lock()
        self._subject_ids: dict[tuple[int, str], list[int]] = {}

    # ------------------------------------------------------------------
    # search
    # ------------------------------------------------------------------

    def semantic_search(self, params: SearchParams, user_id: str) -> SearchOutcome:
        if not params.query.strip():
            raise EmptyQuery("query must be non-empty")
        allowed = self._repo.accessible_record_ids(user_id)
        if not allowed:
            return SearchOutcome([], degraded=False)
        try:
            (query_vec,) = self._embedder.embed_batch([params.query])
        except (UpstreamUnavailable, UpstreamRejected) as exc:
            raise EmbedderUnavailable(str(exc)) from exc

        neighbors = self._index.knn_filtered(query_vec, params.k, allowed)
        if not neighbors:
            return SearchOutcome([], degraded=False)
        rows = [self._index.get_row(n.id) for n in neighbors]

        degraded = False
        scores: Optional[list[float]] = None
        try:
            scores = self._reranker.rerank(
                RerankRequest(params.query, tuple(row.text for row in rows))
            )
        except (UpstreamUnavailable, UpstreamRejected) as exc:
            logger.warning("reranker unavailable, degrading to first-stage order: %s", exc)
            degraded = True

        chunks = [
            ScoredChunk(
                id=row.id,
                record_id=row.record_id,
                from_metadata=row.from_metadata,
                file_name=row.file_name,
                text=row.text,
                first_stage_score=neighbor.score,
                rerank_score=None if scores is None else scores[i],
            )
            for i, (row, neighbor) in enumerate(zip(rows, neighbors))
        ]
        if not degraded:
            chunks.sort(key=lambda c: (-c.rerank_score, -c.first_stage_score, c.id))
        return SearchOutcome(chunks[: params.n], degraded=degraded)

    # ------------------------------------------------------------------
    # sync: event intake and workers
    # ------------------------------------------------------------------

    def enqueue(self, event: SyncEvent) -> None:
        """Repository listener entry point; newest event wins per subject."""
        key = (event.record_id, event.subject)
        with self._cond:
            current = self._pending.get(key)
            if current is None or event.sequence > current.sequence:
                self._pending[key] = event
                self._retries[key] = 0
                self._failed.pop(key, None)
            self._cond.notify()

    def start(self) -> None:
        with self._cond:
            if self._threads:
                return
            self._stopped = False
            self._threads = [
                threading.Thread(target=self._worker_loop, name=f"sync-{i}", daemon=True)
                for i in range(self._worker_count)
            ]
        for thread in self._threads:
            thread.start()

    def stop(self) -> None:
        with self._cond:
            self._stopped = True
            self._cond.notify_all()
        for thread in self._threads:
            thread.join(timeout=10)
        self._threads = []

    def wait_idle(self, timeout: float = 30.0) -> bool:
        """Block until the queue is drained; True if it drained in time."""
        with self._cond:
            return self._cond.wait_for(
                lambda: not self._pending and not self._inflight, timeout=timeout
            )

    def _take_event(self) -> Optional[SyncEvent]:
        eligible = [
            event for event in self._pending.values() if event.record_id not in self._inflight
        ]
        if not eligible:
            return None
        event = min(eligible, key=lambda e: e.sequence)
        del self._pending[(event.record_id, event.subject)]
        self._inflight.add(event.record_id)
        return event

    def _worker_loop(self) -> None:
        while True:
            with self._cond:
                event = None
                while not self._stopped:
                    event = self._take_event()
                    if event is not None:
                        break
                    self._cond.wait()
                if self._stopped and event is None:
                    return
            key = (event.record_id, event.subject)
            try:
                self.process_sync_event(event)
            except EmbedderUnavailable:
                with self._cond:
                    self._retries[key] = self._retries.get(key, 0) + 1
                    if self._retries[key] > self._max_retries:
                        self._failed[key] = "embedder unavailable after retries"
                    elif key not in self._pending:
                        # no newer event superseded us; try again
                        self._pending[key] = event
            except ExtractionFailed as exc:
                with self._cond:
                    self._failed[key] = str(exc)
            except Exception as exc:  # keep the worker alive; surface in status
                logger.exception("sync event %s failed", event)
                with self._cond:
                    self._failed[key] = f"internal: {exc}"
            finally:
                with self._cond:
                    self._inflight.discard(event.record_id)
                    prev = self._last_sequence.get(event.record_id, 0)
                    self._last_sequence[event.record_id] = max(prev, event.sequence)
                    self._cond.notify_all()

    def sync_status(self) -> dict:
        with self._cond:
            return {
                "queued": len(self._pending),
                "in_flight": len(self._inflight),
                "failed": [
                    {"record_id": rid, "subject": subject, "reason": reason}
                    for (rid, subject), reason in sorted(self._failed.items())
                ],
                "last_sequence_per_record": dict(self._last_sequence),
            }

    # ------------------------------------------------------------------
    # sync: event processing
    # ------------------------------------------------------------------

    def process_sync_event(self, event: SyncEvent) -> SyncOutcome:
        if event.kind == SyncKind.deleted:
            return self._process_deletion(event)
        return self._process_upsert(event)

    def _process_deletion(self, event: SyncEvent) -> SyncOutcome:
        with self._table_lock:
            if event.file_name is None:
                # Metadata deletion only happens when the record goes away;
                # drop everything the record still owns in the table.
                deleted = self._index.delete_by_record(event.record_id)
                for key in [k for k in self._subject_ids if k[0] == event.record_id]:
                    del self._subject_ids[key]
                return SyncOutcome(chunks_written=0, chunks_deleted=deleted)
            old_ids = self._subject_ids.pop((event.record_id, event.subject), [])
            deleted = self._index.delete_ids(old_ids)
            return SyncOutcome(chunks_written=0, chunks_deleted=deleted)

    def _process_upsert(self, event: SyncEvent) -> SyncOutcome:
        doc = self._load_document(event)
        if doc is None:
            return SyncOutcome(0, 0, skipped_reason="source no longer exists")
        if doc.media_kind == MediaKind.unsupported:
            # Still drop stale rows so the table matches a fresh rebuild.
            with self._table_lock:
                old_ids = self._subject_ids.pop((event.record_id, event.subject), [])
                deleted = self._index.delete_ids(old_ids)
            return SyncOutcome(0, deleted, skipped_reason="unsupported media kind")

        try:
            chunks = chunk_document(doc, self._chunking)
        except Exception as exc:
            raise ExtractionFailed(f"{event.record_id}/{event.subject}: {exc}") from exc
        try:
            embeddings = (
                self._embedder.embed_batch([c.text for c in chunks]) if chunks else []
            )
        except UpstreamUnavailable as exc:
            raise EmbedderUnavailable(str(exc)) from exc
        except UpstreamRejected as exc:
            raise ExtractionFailed(f"embedder rejected content: {exc}") from exc

        with self._table_lock:
            key = (event.record_id, event.subject)
            old_ids = self._subject_ids.pop(key, [])
            deleted = self._index.delete_ids(old_ids)
            new_ids = []
            for chunk, embedding in zip(chunks, embeddings):
                chunk_id = next(self._chunk_counter)
                self._index.insert(
                    ChunkRow(
                        id=chunk_id,
                        record_id=chunk.record_id,
                        from_metadata=chunk.from_metadata,
                        file_name=chunk.file_name,
                        embedding=embedding,
                        text=chunk.text,
                    )
                )
                new_ids.append(chunk_id)
            if new_ids:
                self._subject_ids[key] = new_ids
        return SyncOutcome(chunks_written=len(new_ids), chunks_deleted=deleted)

    def _load_document(self, event: SyncEvent) -> Optional[RawDocument]:
        if not self._repo.has_record(event.record_id):
            return None
        if event.file_name is None:
            text = self._repo.metadata_document(event.record_id)
            return RawDocument(event.record_id, None, MediaKind.json, text)
        record = self._repo.get_record(event.record_id)
        entry = record.files.get(event.file_name)
        if entry is None:
            return None
        text = entry.content.decode("utf-8", errors="replace")
        return RawDocument(event.record_id, event.file_name, entry.media_kind, text)

    # ------------------------------------------------------------------
    # bootstrap
    # ------------------------------------------------------------------

    def bootstrap(self) -> int:
        """Index current repository state; returns chunks written.

        Used at startup after fixture import and as the rebuild oracle in
        equivalence tests.
        """
        written = 0
        for record in self._repo.records():
            events = [SyncEvent(record.record_id, None, SyncKind.created_or_updated, 0)]
            events.extend(
                SyncEvent(record.record_id, name, SyncKind.created_or_updated, 0)
                for name in sorted(record.files)
            )
            for event in events:
                outcome = self.process_sync_event(event)
                written += outcome.chunks_written
        return written

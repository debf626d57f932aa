"""In-process HNSW index over chunk embeddings with access-filtered search.

The graph is a multi-layer proximity structure: a node gets a geometric
random level; upper layers are sparse express lanes, layer 0 holds everyone.
Search greedily descends the upper layers, then runs a bounded best-first
expansion on layer 0.

Access filtering happens during that expansion: nodes whose record is not in
the allowed set are still traversed (their edges matter for connectivity)
but never emitted. This is the visit-but-don't-emit strategy; it keeps
recall stable even when the allowed fraction is small, at the cost of a
longer walk.

Similarity is the inner product of L2-normalized float32 vectors, so
distance is just the negated dot product. An exact brute-force search over
the same rows serves as the recall oracle and must never be folded into the
graph path.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Callable, Iterable, Optional

import numpy as np

from .errors import (
    CorruptSnapshot,
    DimensionMismatch,
    DuplicateId,
    IoFailure,
    VaultError,
)

_NORM_TOLERANCE = 1e-3


@dataclass(frozen=True)
class HnswParams:
    dim: int = 1024
    M: int = 16
    ef_construction: int = 200
    # the default beam must keep mean recall at k=50 above 0.9 even on
    # structureless (uniform random) corpora, which need a far wider beam
    # than clustered embedding data; 100 measures ~0.39 there, 800 ~0.94
    ef_search: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef values must be positive")

    @property
    def level_norm(self) -> float:
        return 1.0 / math.log(self.M)


@dataclass(frozen=True)
class Neighbor:
    id: int
    score: float


@dataclass
class ChunkRow:
    """One vector-table row; exactly these six columns."""

    id: int
    record_id: int
    from_metadata: bool
    file_name: Optional[str]
    embedding: np.ndarray
    text: str


class _RwLock:
    """Single writer, many readers. A waiting writer blocks new readers so a
    steady reader stream cannot starve it."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writing = False
        self._writers_waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writing or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._writers_waiting += 1
            try:
                while self._writing or self._readers:
                    self._cond.wait()
            finally:
                self._writers_waiting -= 1
            self._writing = True
        try:
            yield
        finally:
            with self._cond:
                self._writing = False
                self._cond.notify_all()


_HEADER_BYTES = 64          # fixed index overhead
_NODE_BYTES = 32            # per-node bookkeeping (level, slot maps, alive flag)
_LAYER_BYTES = 8            # per adjacency list header
_EDGE_BYTES = 4             # per neighbor entry
_ROW_BYTES = 48             # per-row bookkeeping outside the payload columns

_SNAPSHOT_MAGIC = b"VRIX"
_SNAPSHOT_VERSION = 1

_COMPACT_TOMBSTONE_SHARE = 0.30


class HnswIndex:
    """HNSW graph plus the chunk row store it indexes."""

    def __init__(self, params: HnswParams | None = None):
        self.params = params or HnswParams()
        self._lock = _RwLock()
        self._rng = random.Random(self.params.seed)
        self._reset_storage(capacity=1024)

    # ------------------------------------------------------------------
    # storage
    # ------------------------------------------------------------------

    def _reset_storage(self, capacity: int) -> None:
        dim = self.params.dim
        self._vectors = np.empty((capacity, dim), dtype=np.float32)
        self._record_arr = np.zeros(capacity, dtype=np.int64)
        self._alive_arr = np.zeros(capacity, dtype=bool)
        self._visited = np.zeros(capacity, dtype=np.int64)
        self._visit_gen = 0
        self._ids: list[int] = []
        self._from_metadata: list[bool] = []
        self._file_names: list[Optional[str]] = []
        self._texts: list[str] = []
        self._levels: list[int] = []
        self._links: list[list[list[int]]] = []
        self._slot_of: dict[int, int] = {}
        self._slots_by_record: dict[int, set[int]] = {}
        self._entry = -1
        self._max_level = -1
        self._n_slots = 0
        self._n_tombstones = 0

    def _grow(self) -> None:
        capacity = self._vectors.shape[0]
        new_cap = max(int(capacity * 1.5), capacity + 1)
        for name in ("_vectors", "_record_arr", "_alive_arr", "_visited"):
            old = getattr(self, name)
            shape = (new_cap,) + old.shape[1:]
            grown = np.zeros(shape, dtype=old.dtype) if old.ndim == 1 else np.empty(shape, dtype=old.dtype)
            grown[:capacity] = old[:capacity]
            setattr(self, name, grown)

    def _alloc_slot(self, row_id: int, record_id: int, from_metadata: bool,
                    file_name: Optional[str], text: str, emb: np.ndarray) -> int:
        if self._n_slots == self._vectors.shape[0]:
            self._grow()
        slot = self._n_slots
        self._n_slots += 1
        self._vectors[slot] = emb
        self._record_arr[slot] = record_id
        self._alive_arr[slot] = True
        self._ids.append(row_id)
        self._from_metadata.append(from_metadata)
        self._file_names.append(file_name)
        self._texts.append(text)
        self._slot_of[row_id] = slot
        self._slots_by_record.setdefault(record_id, set()).add(slot)
        return slot

    # ------------------------------------------------------------------
    # distance and traversal helpers
    # ------------------------------------------------------------------

    def _dist(self, q: np.ndarray, slot: int) -> float:
        return -float(self._vectors[slot] @ q)

    def _next_gen(self) -> int:
        self._visit_gen += 1
        return self._visit_gen

    def _greedy_descend(self, q: np.ndarray, cur: int, curd: float, layer: int) -> tuple[int, float]:
        while True:
            nbrs = self._links[cur][layer]
            if not nbrs:
                return cur, curd
            arr = np.fromiter(nbrs, np.int64, len(nbrs))
            ds = -(self._vectors[arr] @ q)
            i = int(np.argmin(ds))
            if float(ds[i]) < curd:
                cur, curd = int(arr[i]), float(ds[i])
            else:
                return cur, curd

    def _emittable(self, slot: int, allowed: Optional[frozenset]) -> bool:
        if not self._alive_arr[slot]:
            return False
        return allowed is None or int(self._record_arr[slot]) in allowed

    def _search_layer(
        self,
        q: np.ndarray,
        entries: Iterable[int],
        ef: int,
        layer: int,
        allowed: Optional[frozenset] = None,
    ) -> list[tuple[float, int, int]]:
        """Bounded best-first expansion; returns emittable (dist, id, slot).

        Non-emittable nodes (tombstoned, or filtered out by the allowed set)
        still feed the candidate frontier so the walk can pass through them.
        """
        gen = self._next_gen()
        candidates: list[tuple[float, int, int]] = []     # min-heap on dist
        top: list[tuple[float, int, int]] = []            # max-heap via negation
        for slot in entries:
            if self._visited[slot] == gen:
                continue
            self._visited[slot] = gen
            d = self._dist(q, slot)
            heappush(candidates, (d, self._ids[slot], slot))
            if self._emittable(slot, allowed):
                heappush(top, (-d, -self._ids[slot], slot))
        while len(top) > ef:
            heappop(top)
        bound = -top[0][0] if len(top) == ef else math.inf

        links = self._links
        visited = self._visited
        vectors = self._vectors
        ids = self._ids
        while candidates:
            d, _, c = heappop(candidates)
            if d > bound and len(top) == ef:
                break
            nbrs = links[c][layer]
            if not nbrs:
                continue
            arr = np.fromiter(nbrs, np.int64, len(nbrs))
            fresh = arr[visited[arr] != gen]
            if fresh.size == 0:
                continue
            visited[fresh] = gen
            ds = -(vectors[fresh] @ q)
            for dn, n in zip(ds.tolist(), fresh.tolist()):
                if len(top) == ef and dn >= bound:
                    continue
                heappush(candidates, (dn, ids[n], n))
                if self._emittable(n, allowed):
                    heappush(top, (-dn, -ids[n], n))
                    if len(top) > ef:
                        heappop(top)
                    if len(top) == ef:
                        bound = -top[0][0]
        return [(-negd, -negid, slot) for negd, negid, slot in top]

    def _select_heuristic(self, cands: list[tuple[float, int, int]], m: int) -> list[tuple[float, int]]:
        """Neighbor diversification: keep a candidate only if it is closer
        to the base point than to every already-kept neighbor."""
        cands = sorted(cands)
        if len(cands) <= m:
            return [(d, slot) for d, _, slot in cands]
        kept: list[tuple[float, int]] = []
        kept_slots: list[int] = []
        for d, _, slot in cands:
            if len(kept) == m:
                break
            if kept_slots:
                arr = np.fromiter(kept_slots, np.int64, len(kept_slots))
                to_kept = -(self._vectors[arr] @ self._vectors[slot])
                if float(to_kept.min()) < d:
                    continue
            kept.append((d, slot))
            kept_slots.append(slot)
        if not kept:
            kept = [(cands[0][0], cands[0][2])]
        return kept

    def _shrink_links(self, slot: int, layer: int, max_degree: int) -> None:
        nbrs = self._links[slot][layer]
        if len(nbrs) <= max_degree:
            return
        arr = np.fromiter(nbrs, np.int64, len(nbrs))
        ds = -(self._vectors[arr] @ self._vectors[slot])
        cands = [(float(d), self._ids[n], n) for d, n in zip(ds.tolist(), nbrs)]
        self._links[slot][layer] = [s for _, s in self._select_heuristic(cands, max_degree)]

    # ------------------------------------------------------------------
    # public API
    # ------------------------------------------------------------------

    def insert(self, row: ChunkRow) -> None:
        emb = np.asarray(row.embedding, dtype=np.float32)
        if emb.shape != (self.params.dim,):
            raise DimensionMismatch(
                f"expected dim {self.params.dim}, got {emb.shape}"
            )
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > _NORM_TOLERANCE:
            raise VaultError(f"embedding must be L2-normalized, norm={norm:.4f}")
        with self._lock.write():
            if row.id in self._slot_of:
                raise DuplicateId(str(row.id))
            self._insert_unlocked(row.id, row.record_id, row.from_metadata,
                                  row.file_name, emb, row.text)

    def _insert_unlocked(self, row_id: int, record_id: int, from_metadata: bool,
                         file_name: Optional[str], emb: np.ndarray, text: str) -> None:
        slot = self._alloc_slot(row_id, record_id, from_metadata, file_name, text, emb)
        level = int(-math.log(max(self._rng.random(), 1e-12)) * self.params.level_norm)
        self._levels.append(level)
        self._links.append([[] for _ in range(level + 1)])

        if self._entry < 0:
            self._entry = slot
            self._max_level = level
            return

        m = self.params.M
        cur = self._entry
        curd = self._dist(emb, cur)
        for layer in range(self._max_level, level, -1):
            cur, curd = self._greedy_descend(emb, cur, curd, layer)

        entries = [cur]
        for layer in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(emb, entries, self.params.ef_construction, layer)
            if not found:
                continue
            selected = self._select_heuristic(found, m)
            self._links[slot][layer] = [s for _, s in selected]
            max_degree = 2 * m if layer == 0 else m
            for _, nbr in selected:
                self._links[nbr][layer].append(slot)
                self._shrink_links(nbr, layer, max_degree)
            best = min(found)
            entries = [best[2]]

        if level > self._max_level:
            self._max_level = level
            self._entry = slot

    def knn_filtered(self, query: np.ndarray, k: int, allowed: Iterable[int]) -> list[Neighbor]:
        q = self._as_query(query)
        if k < 1:
            raise ValueError("k must be at least 1")
        allowed_set = frozenset(int(r) for r in allowed)
        if not allowed_set:
            return []
        with self._lock.read():
            if self._entry < 0 or self._n_slots == self._n_tombstones:
                return []
            ef = max(self.params.ef_search, k)
            cur = self._entry
            curd = self._dist(q, cur)
            for layer in range(self._max_level, 0, -1):
                cur, curd = self._greedy_descend(q, cur, curd, layer)
            found = self._search_layer(q, [cur], ef, 0, allowed_set)
            found.sort()
            return [Neighbor(rid, -d) for d, rid, _ in found[:k]]

    def brute_force_knn(self, query: np.ndarray, k: int, allowed: Iterable[int]) -> list[Neighbor]:
        """Exact filtered top-k; the oracle the graph search is judged by."""
        q = self._as_query(query)
        if k < 1:
            raise ValueError("k must be at least 1")
        allowed_set = set(int(r) for r in allowed)
        if not allowed_set:
            return []
        with self._lock.read():
            n = self._n_slots
            if n == 0:
                return []
            mask = self._alive_arr[:n] & np.isin(
                self._record_arr[:n], np.fromiter(allowed_set, np.int64, len(allowed_set))
            )
            slots = np.nonzero(mask)[0]
            if slots.size == 0:
                return []
            sims = self._vectors[slots] @ q
            ids = np.fromiter((self._ids[s] for s in slots.tolist()), np.int64, slots.size)
            order = np.lexsort((ids, -sims))[:k]
            return [Neighbor(int(ids[i]), float(sims[i])) for i in order]

    def delete_by_record(self, record_id: int) -> int:
        with self._lock.write():
            slots = self._slots_by_record.pop(int(record_id), None)
            if not slots:
                return 0
            removed = len(slots)
            for slot in slots:
                self._alive_arr[slot] = False
                del self._slot_of[self._ids[slot]]
                self._texts[slot] = ""
                self._file_names[slot] = None
            self._n_tombstones += removed
            self._maybe_compact()
            return removed

    def delete_ids(self, row_ids: Iterable[int]) -> int:
        """Remove specific rows (used when one subject is re-chunked)."""
        with self._lock.write():
            removed = 0
            for row_id in row_ids:
                slot = self._slot_of.pop(int(row_id), None)
                if slot is None:
                    continue
                removed += 1
                self._alive_arr[slot] = False
                rid = int(self._record_arr[slot])
                group = self._slots_by_record.get(rid)
                if group is not None:
                    group.discard(slot)
                    if not group:
                        del self._slots_by_record[rid]
                self._texts[slot] = ""
                self._file_names[slot] = None
            self._n_tombstones += removed
            self._maybe_compact()
            return removed

    def _maybe_compact(self) -> None:
        if self._n_slots == 0:
            return
        if self._n_tombstones / self._n_slots <= _COMPACT_TOMBSTONE_SHARE:
            return
        survivors = [
            (self._ids[s], int(self._record_arr[s]), self._from_metadata[s],
             self._file_names[s], np.array(self._vectors[s]), self._texts[s])
            for s in range(self._n_slots)
            if self._alive_arr[s]
        ]
        self._rng = random.Random(self.params.seed)
        self._reset_storage(capacity=max(len(survivors), 1024))
        for row_id, record_id, from_metadata, file_name, emb, text in survivors:
            self._insert_unlocked(row_id, record_id, from_metadata, file_name, emb, text)

    def get_row(self, row_id: int) -> ChunkRow:
        slot = self._slot_of.get(int(row_id))
        if slot is None:
            raise KeyError(row_id)
        return ChunkRow(
            id=self._ids[slot],
            record_id=int(self._record_arr[slot]),
            from_metadata=self._from_metadata[slot],
            file_name=self._file_names[slot],
            embedding=np.array(self._vectors[slot]),
            text=self._texts[slot],
        )

    def has_id(self, row_id: int) -> bool:
        return int(row_id) in self._slot_of

    def ids(self) -> list[int]:
        return sorted(self._slot_of)

    def record_ids(self) -> set[int]:
        return set(self._slots_by_record)

    def __len__(self) -> int:
        return self._n_slots - self._n_tombstones

    def reassign_record_ids(self, record_of: Callable[[int], int]) -> None:
        """Bulk-relabel row record ids without touching the graph.

        The graph depends only on vectors, so benchmarks can re-partition the
        same corpus into different record layouts between runs.
        """
        with self._lock.write():
            self._slots_by_record = {}
            for slot in range(self._n_slots):
                if not self._alive_arr[slot]:
                    continue
                rid = int(record_of(self._ids[slot]))
                self._record_arr[slot] = rid
                self._slots_by_record.setdefault(rid, set()).add(slot)

    # ------------------------------------------------------------------
    # accounting
    # ------------------------------------------------------------------

    def memory_report(self) -> dict:
        with self._lock.read():
            graph = _HEADER_BYTES
            for slot in range(self._n_slots):
                graph += _NODE_BYTES
                for layer_links in self._links[slot]:
                    graph += _LAYER_BYTES + _EDGE_BYTES * len(layer_links)
            dim_bytes = 4 * self.params.dim
            rows = 0
            for slot in range(self._n_slots):
                if not self._alive_arr[slot]:
                    continue
                name = self._file_names[slot]
                rows += (
                    _ROW_BYTES
                    + dim_bytes
                    + len(self._texts[slot].encode("utf-8"))
                    + (len(name.encode("utf-8")) if name else 0)
                    + 8  # id
                    + 8  # record_id
                    + 1  # from_metadata
                )
            return {
                "graph_bytes": graph,
                "rows_bytes": rows,
                "total_bytes": graph + rows,
                "vector_count": self._n_slots - self._n_tombstones,
            }

    # ------------------------------------------------------------------
    # snapshot / restore
    # ------------------------------------------------------------------

    def snapshot(self, path: str) -> None:
        with self._lock.write():
            payload = self._serialize()
        digest = hashlib.sha256(payload).digest()
        try:
            with open(path, "wb") as fh:
                fh.write(payload)
                fh.write(digest)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def restore(self, path: str) -> None:
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        if len(blob) < 32 + len(_SNAPSHOT_MAGIC):
            raise CorruptSnapshot("truncated snapshot")
        payload, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(payload).digest() != digest:
            raise CorruptSnapshot("checksum mismatch")
        with self._lock.write():
            self._deserialize(payload)

    def _serialize(self) -> bytes:
        p = self.params
        out = bytearray()
        out += _SNAPSHOT_MAGIC
        out += struct.pack(
            "<IIIIIqqqq",
            _SNAPSHOT_VERSION, p.dim, p.M, p.ef_construction, p.ef_search,
            p.seed, self._n_slots, self._entry, self._max_level,
        )
        version, internal, gauss = self._rng.getstate()
        rng_blob = json.dumps([version, list(internal), gauss]).encode("utf-8")
        out += struct.pack("<I", len(rng_blob)) + rng_blob
        for slot in range(self._n_slots):
            alive = bool(self._alive_arr[slot])
            name = self._file_names[slot]
            name_b = (name or "").encode("utf-8")
            text_b = self._texts[slot].encode("utf-8")
            out += struct.pack(
                "<qqiBBBI",
                self._ids[slot], int(self._record_arr[slot]), self._levels[slot],
                alive, bool(self._from_metadata[slot]), name is not None, len(name_b),
            )
            out += name_b
            out += struct.pack("<Q", len(text_b)) + text_b
            out += self._vectors[slot].tobytes()
            for layer_links in self._links[slot]:
                out += struct.pack("<I", len(layer_links))
                out += np.fromiter(layer_links, np.int32, len(layer_links)).tobytes()
        return bytes(out)

    def _deserialize(self, payload: bytes) -> None:
        if payload[:4] != _SNAPSHOT_MAGIC:
            raise CorruptSnapshot("bad magic")
        off = 4
        version, dim, m, efc, efs, seed, n_slots, entry, max_level = struct.unpack_from(
            "<IIIIIqqqq", payload, off
        )
        off += struct.calcsize("<IIIIIqqqq")
        if version != _SNAPSHOT_VERSION:
            raise CorruptSnapshot(f"unsupported version {version}")
        (rng_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        try:
            rng_version, rng_internal, rng_gauss = json.loads(payload[off : off + rng_len])
        except ValueError as exc:
            raise CorruptSnapshot(f"bad rng state: {exc}") from exc
        rng_state = (rng_version, tuple(rng_internal), rng_gauss)
        off += rng_len

        self.params = HnswParams(dim=dim, M=m, ef_construction=efc, ef_search=efs, seed=seed)
        self._reset_storage(capacity=max(int(n_slots), 1024))
        self._rng.setstate(rng_state)
        self._entry = entry
        self._max_level = max_level
        try:
            for _ in range(n_slots):
                row_id, record_id, level, alive, from_meta, has_name, name_len = struct.unpack_from(
                    "<qqiBBBI", payload, off
                )
                off += struct.calcsize("<qqiBBBI")
                name = payload[off : off + name_len].decode("utf-8") if has_name else None
                off += name_len
                (text_len,) = struct.unpack_from("<Q", payload, off)
                off += 8
                text = payload[off : off + text_len].decode("utf-8")
                off += text_len
                vec = np.frombuffer(payload, np.float32, dim, off).copy()
                off += 4 * dim
                slot = self._n_slots
                if self._n_slots == self._vectors.shape[0]:
                    self._grow()
                self._n_slots += 1
                self._vectors[slot] = vec
                self._record_arr[slot] = record_id
                self._alive_arr[slot] = bool(alive)
                self._ids.append(row_id)
                self._from_metadata.append(bool(from_meta))
                self._file_names.append(name)
                self._texts.append(text)
                self._levels.append(level)
                links = []
                for _ in range(level + 1):
                    (cnt,) = struct.unpack_from("<I", payload, off)
                    off += 4
                    links.append(np.frombuffer(payload, np.int32, cnt, off).tolist())
                    off += 4 * cnt
                self._links.append(links)
                if alive:
                    self._slot_of[row_id] = slot
                    self._slots_by_record.setdefault(record_id, set()).add(slot)
                else:
                    self._n_tombstones += 1
        except (struct.error, IndexError, UnicodeDecodeError) as exc:
            raise CorruptSnapshot(str(exc)) from exc
        if off != len(payload):
            raise CorruptSnapshot("trailing bytes")

    # ------------------------------------------------------------------

    def _as_query(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.params.dim,):
            raise DimensionMismatch(f"expected dim {self.params.dim}, got {q.shape}")
        return q

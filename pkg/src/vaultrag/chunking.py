"""Split record metadata and file contents into bounded text chunks.

Three splitters:

* :func:`split_plain` cuts on a separator hierarchy (blank line, newline,
  sentence end, space, character), always choosing the coarsest level that
  keeps every piece within the limit. With overlap 0 the chunks concatenate
  back to the input byte-for-byte.
* :func:`split_code` is the same machinery restricted to blank lines and
  line breaks; it never cuts inside a line unless a single line is over
  the limit.
* :func:`split_json` keeps structured documents "mostly intact": every
  chunk is itself a valid JSON document consisting of the carried subtrees
  wrapped in their ancestor path, with sibling keys outside the chunk
  omitted. Object keys are repeated on the path; array elements are wrapped
  as single-element arrays (indices are never invented as keys).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

from .errors import MalformedJson, UnsupportedMediaKind
from .repository import MediaKind

_PLAIN_SEPARATORS: list[list[str]] = [
    ["\n\n"],
    ["\n"],
    [". ", "! ", "? "],
    [" "],
]
_CODE_SEPARATORS: list[list[str]] = [
    ["\n\n"],
    ["\n"],
]


@dataclass(frozen=True)
class ChunkingConfig:
    max_chunk_chars: int = 1500
    overlap_chars: int = 150
    json_max_chunk_chars: int = 1500


@dataclass(frozen=True)
class RawDocument:
    """One extracted text to be chunked; file_name None means metadata."""

    record_id: int
    file_name: Optional[str]
    media_kind: MediaKind
    text: str

    @property
    def from_metadata(self) -> bool:
        return self.file_name is None


@dataclass(frozen=True)
class TextChunk:
    record_id: int
    from_metadata: bool
    file_name: Optional[str]
    text: str
    ordinal: int

    def __post_init__(self):
        if self.from_metadata != (self.file_name is None):
            raise ValueError("from_metadata and file_name are mutually exclusive")


# ---------------------------------------------------------------------------
# plain and code splitting
# ---------------------------------------------------------------------------


def _cut(text: str, separators: Sequence[str]) -> list[str]:
    """Cut after each separator occurrence; concatenation equals the input."""
    pieces: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        for sep in separators:
            if text.startswith(sep, i):
                end = i + len(sep)
                pieces.append(text[start:end])
                start = end
                i = end
                break
        else:
            i += 1
    if start < n:
        pieces.append(text[start:])
    return pieces


def _segments(text: str, target: int, hierarchy: Sequence[Sequence[str]], level: int) -> list[str]:
    if len(text) <= target:
        return [text]
    if level >= len(hierarchy):
        return [text[i : i + target] for i in range(0, len(text), target)]
    pieces = _cut(text, hierarchy[level])
    if len(pieces) == 1:
        return _segments(text, target, hierarchy, level + 1)
    out: list[str] = []
    buf = ""
    for piece in pieces:
        if len(piece) > target:
            if buf:
                out.append(buf)
                buf = ""
            out.extend(_segments(piece, target, hierarchy, level + 1))
        elif len(buf) + len(piece) <= target:
            buf += piece
        else:
            out.append(buf)
            buf = piece
    if buf:
        out.append(buf)
    return out


def _split_with_overlap(
    text: str,
    max_chunk_chars: int,
    overlap_chars: int,
    hierarchy: Sequence[Sequence[str]],
) -> list[str]:
    if max_chunk_chars <= 0:
        raise ValueError("max_chunk_chars must be positive")
    if overlap_chars < 0 or overlap_chars >= max_chunk_chars:
        raise ValueError("require max_chunk_chars > overlap_chars >= 0")
    if not text:
        return []
    target = max_chunk_chars - overlap_chars
    segments = _segments(text, target, hierarchy, 0)
    if overlap_chars == 0:
        return segments
    chunks = [segments[0]]
    for segment in segments[1:]:
        prev = chunks[-1]
        shared = min(overlap_chars, len(prev))
        chunks.append(prev[-shared:] + segment)
    return chunks


def split_plain(text: str, max_chunk_chars: int, overlap_chars: int) -> list[str]:
    """Split prose. Empty input yields an empty list, not an error."""
    return _split_with_overlap(text, max_chunk_chars, overlap_chars, _PLAIN_SEPARATORS)


def split_code(text: str, max_chunk_chars: int, overlap_chars: int) -> list[str]:
    """Split source code on blank lines and line breaks only."""
    return _split_with_overlap(text, max_chunk_chars, overlap_chars, _CODE_SEPARATORS)


# ---------------------------------------------------------------------------
# JSON splitting
# ---------------------------------------------------------------------------

# Path steps: ("key", name) descends an object, ("idx", i) an array element.
_Path = tuple

class _Arr(dict):
    """Array accumulator keyed by original index, in document order."""


def _to_plain(node):
    if isinstance(node, _Arr):
        return [_to_plain(v) for v in node.values()]
    if isinstance(node, dict):
        return {k: _to_plain(v) for k, v in node.items()}
    if isinstance(node, list):
        return [_to_plain(v) for v in node]
    return node


def _render(node) -> str:
    return json.dumps(_to_plain(node), ensure_ascii=False, separators=(",", ":"))


def _wrap(path: _Path, value):
    for step, arg in reversed(path):
        if step == "key":
            value = {arg: value}
        else:
            arr = _Arr()
            arr[arg] = value
            value = arr
    return value


def _merge_units(units: list[tuple[_Path, object]]):
    root = None
    for path, value in units:
        if not path:
            return value
        if root is None:
            root = _Arr() if path[0][0] == "idx" else {}
        node = root
        for depth, (_, arg) in enumerate(path[:-1]):
            if arg not in node:
                node[arg] = _Arr() if path[depth + 1][0] == "idx" else {}
            node = node[arg]
        node[path[-1][1]] = value
    return root


def _unit_len(path: _Path, value) -> int:
    return len(_render(_wrap(path, value)))


def _pack_units(node, path: _Path, limit: int) -> Iterator[tuple[_Path, object]]:
    if _unit_len(path, node) <= limit:
        yield (path, node)
        return
    if isinstance(node, dict) and node:
        for key, child in node.items():
            yield from _pack_units(child, path + (("key", key),), limit)
    elif isinstance(node, list) and node:
        for i, child in enumerate(node):
            yield from _pack_units(child, path + (("idx", i),), limit)
    elif isinstance(node, str):
        # Atomic leaf over the limit: split the string value and wrap each
        # piece in the same path. Escaping can inflate the rendered length,
        # so shrink the budget until every wrapped piece fits.
        budget = max(limit - _unit_len(path, ""), 1)
        # An empty string can still be oversized via its path; keep the leaf.
        pieces = split_plain(node, budget, 0) or [""]
        while budget > 1 and any(_unit_len(path, p) > limit for p in pieces):
            budget = max(budget // 2, 1)
            pieces = split_plain(node, budget, 0) or [""]
        for piece in pieces:
            yield (path, piece)
    else:
        # Non-string scalar wider than the limit; emitted whole.
        yield (path, node)


def split_json(document_text: str, max_chunk_chars: int) -> list[str]:
    """Split a JSON document into valid JSON chunks bounded by the limit.

    The union of carried leaf paths over all chunks equals the leaf paths of
    the input. A chunk only exceeds the limit when a pathological path depth
    leaves no room for even a one-character leaf piece.
    """
    if max_chunk_chars <= 0:
        raise ValueError("max_chunk_chars must be positive")
    try:
        root = json.loads(document_text)
    except ValueError as exc:
        raise MalformedJson(str(exc)) from exc
    canonical = _render(root)
    if len(canonical) <= max_chunk_chars:
        return [canonical]

    chunks: list[str] = []
    current: list[tuple[_Path, object]] = []
    seen_paths: set[_Path] = set()
    for path, value in _pack_units(root, (), max_chunk_chars):
        # Pieces of one split leaf share a path and must not share a chunk.
        collision = path in seen_paths
        if current and not collision:
            trial = current + [(path, value)]
            if len(_render(_merge_units(trial))) <= max_chunk_chars:
                current = trial
                seen_paths.add(path)
                continue
        if current:
            chunks.append(_render(_merge_units(current)))
        current = [(path, value)]
        seen_paths = {path}
    if current:
        chunks.append(_render(_merge_units(current)))
    return chunks


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def chunk_document(doc: RawDocument, config: ChunkingConfig | None = None) -> list[TextChunk]:
    """Chunk one extracted document and attach provenance plus ordinals."""
    config = config or ChunkingConfig()
    if doc.media_kind == MediaKind.unsupported:
        raise UnsupportedMediaKind(f"record {doc.record_id}: {doc.file_name!r}")
    if doc.from_metadata or doc.media_kind == MediaKind.json:
        texts = split_json(doc.text, config.json_max_chunk_chars)
    elif doc.media_kind == MediaKind.code:
        texts = split_code(doc.text, config.max_chunk_chars, config.overlap_chars)
    else:
        texts = split_plain(doc.text, config.max_chunk_chars, config.overlap_chars)
    return [
        TextChunk(
            record_id=doc.record_id,
            from_metadata=doc.from_metadata,
            file_name=doc.file_name,
            text=text,
            ordinal=i,
        )
        for i, text in enumerate(texts)
    ]

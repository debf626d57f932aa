"""Access-controlled record store: records, files, links, collections, grants.

This is the system of record every other module hangs off. Mutations are
serialized behind a single re-entrant lock (stronger than the per-record
serialization the rest of the code assumes); reads are lock-free snapshots.
Every content change emits a :class:`SyncEvent` to registered listeners, in
commit order, so the vector table can follow along.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from typing import Callable, Iterator, Optional

from .errors import (
    DuplicateIdentifier,
    Forbidden,
    InvalidObjectType,
    NotFound,
    UnknownUser,
    VaultError,
)

logger = logging.getLogger(__name__)

_SLUG_RE = re.compile(r"[a-z0-9-_]+")


class MediaKind(str, Enum):
    plain_text = "plain_text"
    markdown = "markdown"
    code = "code"
    json = "json"
    unsupported = "unsupported"


class Capability(str, Enum):
    read = "read"
    write = "write"


class ObjectType(str, Enum):
    record = "record"
    collection = "collection"


class SyncKind(str, Enum):
    created_or_updated = "created_or_updated"
    deleted = "deleted"


@dataclass(frozen=True)
class SyncEvent:
    """Notification that a record's metadata or one of its files changed.

    ``file_name`` is None when the subject is the record metadata itself.
    ``sequence`` increases monotonically across the whole repository, so it
    also increases strictly per record.
    """

    record_id: int
    file_name: Optional[str]
    kind: SyncKind
    sequence: int

    @property
    def subject(self) -> str:
        return "metadata" if self.file_name is None else f"file:{self.file_name}"


@dataclass
class FileEntry:
    file_name: str
    media_kind: MediaKind
    content: bytes
    size_bytes: int


@dataclass
class Record:
    record_id: int
    identifier: str
    title: str
    description: str
    extras: dict
    files: dict[str, FileEntry] = field(default_factory=dict)
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    updated_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))


@dataclass
class Link:
    from_id: int
    to_id: int
    from_type: ObjectType
    to_type: ObjectType
    annotation: str


@dataclass
class Collection:
    collection_id: int
    identifier: str
    title: str
    member_record_ids: set[int] = field(default_factory=set)


@dataclass(frozen=True)
class User:
    user_id: str
    display_name: str
    bearer_token: str


@dataclass(frozen=True)
class RepositoryLimits:
    """Bounds on the extras tree accepted at record creation."""

    max_extras_depth: int = 32
    max_extras_bytes: int = 1_000_000


def _extras_depth(node: object) -> int:
    if isinstance(node, dict):
        return 1 + max((_extras_depth(v) for v in node.values()), default=0)
    if isinstance(node, list):
        return 1 + max((_extras_depth(v) for v in node), default=0)
    return 0


def _validate_extras(extras: dict, limits: RepositoryLimits) -> None:
    if not isinstance(extras, dict):
        raise VaultError("extras must be a key-value tree")
    if _extras_depth(extras) > limits.max_extras_depth:
        raise VaultError(f"extras tree deeper than {limits.max_extras_depth}")
    try:
        encoded = json.dumps(extras, ensure_ascii=False)
    except (TypeError, ValueError) as exc:
        raise VaultError(f"extras not serializable: {exc}") from exc
    if len(encoded.encode("utf-8")) > limits.max_extras_bytes:
        raise VaultError(f"extras exceed {limits.max_extras_bytes} bytes")


class Repository:
    """In-memory record repository with per-user read/write grants."""

    def __init__(self, limits: RepositoryLimits | None = None):
        self.limits = limits or RepositoryLimits()
        self._lock = threading.RLock()
        self._users: dict[str, User] = {}
        self._tokens: dict[str, str] = {}
        self._records: dict[int, Record] = {}
        self._identifiers: dict[str, int] = {}
        self._collections: dict[int, Collection] = {}
        self._collection_identifiers: dict[str, int] = {}
        self._links: list[Link] = []
        # user_id -> record_id -> capability; write implies read at query time
        self._grants: dict[str, dict[int, Capability]] = {}
        self._next_record_id = 1
        self._next_collection_id = 1
        self._sequence = 0
        self._listeners: list[Callable[[SyncEvent], None]] = []

    # ------------------------------------------------------------------
    # users and grants
    # ------------------------------------------------------------------

    def add_user(
        self,
        user_id: str,
        display_name: str | None = None,
        bearer_token: str | None = None,
    ) -> User:
        with self._lock:
            if user_id in self._users:
                return self._users[user_id]
            token = bearer_token or f"tok-{user_id}"
            if token in self._tokens:
                raise VaultError(f"bearer token already assigned: {token!r}")
            user = User(user_id, display_name or user_id, token)
            self._users[user_id] = user
            self._tokens[token] = user_id
            return user

    def get_user(self, user_id: str) -> User:
        try:
            return self._users[user_id]
        except KeyError:
            raise UnknownUser(user_id) from None

    def user_for_token(self, token: str) -> Optional[str]:
        return self._tokens.get(token)

    def grant(self, subject: str, record_id: int, capability: Capability) -> None:
        with self._lock:
            self.get_user(subject)
            self._require_record(record_id)
            self._grants.setdefault(subject, {})[record_id] = capability

    def accessible_record_ids(self, user_id: str) -> set[int]:
        """All record ids the user may read. Linear in the user's grants."""
        self.get_user(user_id)
        return set(self._grants.get(user_id, {}))

    def can_read(self, user_id: str, record_id: int) -> bool:
        return record_id in self._grants.get(user_id, {})

    def can_write(self, user_id: str, record_id: int) -> bool:
        return self._grants.get(user_id, {}).get(record_id) == Capability.write

    # ------------------------------------------------------------------
    # records and files
    # ------------------------------------------------------------------

    def create_record(
        self,
        title: str,
        identifier: str,
        extras: dict,
        owner: str,
        description: str = "",
    ) -> Record:
        with self._lock:
            self.get_user(owner)
            if not _SLUG_RE.fullmatch(identifier):
                raise VaultError(f"identifier not a valid slug: {identifier!r}")
            if identifier in self._identifiers:
                raise DuplicateIdentifier(identifier)
            _validate_extras(extras, self.limits)
            record = Record(
                record_id=self._next_record_id,
                identifier=identifier,
                title=title,
                description=description,
                extras=extras,
            )
            self._next_record_id += 1
            self._records[record.record_id] = record
            self._identifiers[identifier] = record.record_id
            self._grants.setdefault(owner, {})[record.record_id] = Capability.write
            self._emit(record.record_id, None, SyncKind.created_or_updated)
            return record

    def update_metadata(
        self,
        record_id: int,
        caller: str,
        title: str | None = None,
        description: str | None = None,
        extras: dict | None = None,
    ) -> Record:
        with self._lock:
            record = self._require_record(record_id)
            self._require_write(caller, record_id)
            if extras is not None:
                _validate_extras(extras, self.limits)
                record.extras = extras
            if title is not None:
                record.title = title
            if description is not None:
                record.description = description
            record.updated_at = datetime.now(timezone.utc)
            self._emit(record_id, None, SyncKind.created_or_updated)
            return record

    def upload_file(
        self,
        record_id: int,
        file_name: str,
        media_kind: MediaKind,
        content: bytes,
        caller: str,
    ) -> FileEntry:
        with self._lock:
            record = self._require_record(record_id)
            self._require_write(caller, record_id)
            entry = FileEntry(file_name, MediaKind(media_kind), bytes(content), len(content))
            record.files[file_name] = entry
            record.updated_at = datetime.now(timezone.utc)
            self._emit(record_id, file_name, SyncKind.created_or_updated)
            # the metadata document lists file names, so the file change
            # invalidates it too
            self._emit(record_id, None, SyncKind.created_or_updated)
            return entry

    def delete_file(self, record_id: int, file_name: str, caller: str) -> None:
        with self._lock:
            record = self._require_record(record_id)
            self._require_write(caller, record_id)
            if file_name not in record.files:
                raise NotFound(f"file {file_name!r} on record {record_id}")
            del record.files[file_name]
            record.updated_at = datetime.now(timezone.utc)
            self._emit(record_id, file_name, SyncKind.deleted)
            self._emit(record_id, None, SyncKind.created_or_updated)

    def delete_record(self, record_id: int, caller: str) -> None:
        """Remove the record plus its files, links, grants, and memberships."""
        with self._lock:
            record = self._require_record(record_id)
            self._require_write(caller, record_id)
            file_names = list(record.files)
            del self._records[record_id]
            del self._identifiers[record.identifier]
            self._links = [
                link
                for link in self._links
                if not (link.from_type == ObjectType.record and link.from_id == record_id)
                and not (link.to_type == ObjectType.record and link.to_id == record_id)
            ]
            for grants in self._grants.values():
                grants.pop(record_id, None)
            for collection in self._collections.values():
                collection.member_record_ids.discard(record_id)
            for name in file_names:
                self._emit(record_id, name, SyncKind.deleted)
            self._emit(record_id, None, SyncKind.deleted)

    def get_record(self, record_id: int) -> Record:
        """ACL-free lookup for internal callers. API paths use get_metadata."""
        return self._require_record(record_id)

    def has_record(self, record_id: int) -> bool:
        return record_id in self._records

    def record_by_identifier(self, identifier: str) -> Record:
        try:
            return self._records[self._identifiers[identifier]]
        except KeyError:
            raise NotFound(identifier) from None

    def records(self) -> Iterator[Record]:
        return iter(list(self._records.values()))

    def record_count(self) -> int:
        return len(self._records)

    # ------------------------------------------------------------------
    # metadata and connections
    # ------------------------------------------------------------------

    def metadata_document(self, record_id: int) -> str:
        """Canonical JSON metadata document; sorted keys, stable bytes.

        No ACL check: used by the sync worker, which runs as the system.
        """
        record = self._require_record(record_id)
        doc = {
            "record_id": record.record_id,
            "identifier": record.identifier,
            "title": record.title,
            "description": record.description,
            "extras": record.extras,
            "file_names": sorted(record.files),
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=False)

    def get_metadata(self, record_id: int, caller: str) -> str:
        self._require_record(record_id)
        if not self.can_read(caller, record_id):
            raise Forbidden(f"user {caller!r} cannot read record {record_id}")
        return self.metadata_document(record_id)

    def get_connections(self, object_id: int, object_type: str, caller: str) -> list[Link]:
        """Links touching the object, filtered to endpoints the caller can read."""
        try:
            otype = ObjectType(object_type)
        except ValueError:
            raise InvalidObjectType(object_type) from None
        if otype == ObjectType.record:
            self._require_record(object_id)
            if not self.can_read(caller, object_id):
                raise Forbidden(f"user {caller!r} cannot read record {object_id}")
        else:
            if object_id not in self._collections:
                raise NotFound(f"collection {object_id}")
            if not self._can_read_collection(caller, object_id):
                raise Forbidden(f"user {caller!r} cannot read collection {object_id}")

        result = []
        for link in self._links:
            if (link.from_type, link.from_id) == (otype, object_id):
                other_type, other_id = link.to_type, link.to_id
            elif (link.to_type, link.to_id) == (otype, object_id):
                other_type, other_id = link.from_type, link.from_id
            else:
                continue
            if other_type == ObjectType.record:
                if self.can_read(caller, other_id):
                    result.append(link)
            else:
                if self._can_read_collection(caller, other_id):
                    result.append(link)
        return result

    def _can_read_collection(self, user_id: str, collection_id: int) -> bool:
        # Collections carry no own grants; visibility derives from members.
        collection = self._collections.get(collection_id)
        if collection is None:
            return False
        return any(self.can_read(user_id, rid) for rid in collection.member_record_ids)

    # ------------------------------------------------------------------
    # links and collections
    # ------------------------------------------------------------------

    def create_link(
        self,
        from_id: int,
        from_type: str,
        to_id: int,
        to_type: str,
        annotation: str = "",
    ) -> Link:
        with self._lock:
            try:
                ftype, ttype = ObjectType(from_type), ObjectType(to_type)
            except ValueError as exc:
                raise InvalidObjectType(str(exc)) from None
            self._require_object(from_id, ftype)
            self._require_object(to_id, ttype)
            link = Link(from_id, to_id, ftype, ttype, annotation)
            self._links.append(link)
            return link

    def create_collection(self, title: str, identifier: str) -> Collection:
        with self._lock:
            if not _SLUG_RE.fullmatch(identifier):
                raise VaultError(f"identifier not a valid slug: {identifier!r}")
            if identifier in self._collection_identifiers:
                raise DuplicateIdentifier(identifier)
            collection = Collection(self._next_collection_id, identifier, title)
            self._next_collection_id += 1
            self._collections[collection.collection_id] = collection
            self._collection_identifiers[identifier] = collection.collection_id
            return collection

    def add_to_collection(self, collection_id: int, record_id: int) -> None:
        with self._lock:
            if collection_id not in self._collections:
                raise NotFound(f"collection {collection_id}")
            self._require_record(record_id)
            self._collections[collection_id].member_record_ids.add(record_id)

    def get_collection(self, collection_id: int) -> Collection:
        try:
            return self._collections[collection_id]
        except KeyError:
            raise NotFound(f"collection {collection_id}") from None

    def links(self) -> list[Link]:
        return list(self._links)

    # ------------------------------------------------------------------
    # sync plumbing
    # ------------------------------------------------------------------

    def add_listener(self, listener: Callable[[SyncEvent], None]) -> None:
        self._listeners.append(listener)

    def _emit(self, record_id: int, file_name: Optional[str], kind: SyncKind) -> None:
        self._sequence += 1
        event = SyncEvent(record_id, file_name, kind, self._sequence)
        for listener in self._listeners:
            listener(event)

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------

    def _require_record(self, record_id: int) -> Record:
        try:
            return self._records[record_id]
        except KeyError:
            raise NotFound(f"record {record_id}") from None

    def _require_object(self, object_id: int, otype: ObjectType) -> None:
        if otype == ObjectType.record:
            self._require_record(object_id)
        elif object_id not in self._collections:
            raise NotFound(f"collection {object_id}")

    def _require_write(self, caller: str, record_id: int) -> None:
        self.get_user(caller)
        if not self.can_write(caller, record_id):
            raise Forbidden(f"user {caller!r} cannot write record {record_id}")

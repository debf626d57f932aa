"""Tool-calling assistant loop over the repository and retrieval service.

One run walks a fixed graph: the model either calls a tool or produces a
final answer. Tool output and a remaining-budget notice are appended after
every execution; once the budget is spent the model is offered no tools and
has to answer. The final answer must be a JSON object with "answer" and
"sources" fields, re-requested a bounded number of times if malformed.
"""

from __future__ import annotations

import json
import pprint
import re
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from typing import Optional, Union

from .errors import (
    AnswerFormatExhausted,
    BadArguments,
    EmptyQuery,
    Forbidden,
    InvalidObjectType,
    LlmUnavailable,
    NotFound,
    UnknownTool,
    UpstreamUnavailable,
)
from .gateway import ChatMessage, ChatModel, ChatRequest, ToolSpec
from .repository import ObjectType, Repository
from .retrieval import RetrievalService, SearchParams

TOOL_SEARCH = "Kadi_Similarity_Search"
TOOL_METADATA = "Kadi_Get_Meta_Data_Tool"
TOOL_CONNECTIONS = "Kadi_Get_Connections_Tool"

_PROMPT_RESOURCE = "prompts/system_prompt.txt"
_FENCE_RE = re.compile(r"^```[a-zA-Z]*\s*\n(.*?)\n?```\s*$", re.DOTALL)


@dataclass
class AgentConfig:
    max_tool_calls: int = 5
    json_retry_limit: int = 2
    tool_output_char_limit: int = 6000
    search_result_count: int = 8

    def __post_init__(self):
        if self.max_tool_calls < 1:
            raise ValueError("max_tool_calls must be positive")
        if self.json_retry_limit < 0:
            raise ValueError("json_retry_limit must be non-negative")
        if self.tool_output_char_limit < 1:
            raise ValueError("tool_output_char_limit must be positive")
        if self.search_result_count < 1:
            raise ValueError("search_result_count must be positive")


@dataclass(frozen=True)
class AnswerSource:
    record_id: int
    specifier: str


@dataclass(frozen=True)
class AssistantAnswer:
    answer: str
    sources: tuple[AnswerSource, ...] = ()


@dataclass(frozen=True)
class FormatViolation:
    reason: str


@dataclass
class AgentState:
    """Mutable per-run state; confined to a single run."""

    history: list[ChatMessage]
    user_id: str
    instance_url: str
    max_tool_calls: int = 5
    tool_calls_used: int = 0
    json_retries_used: int = 0


@dataclass(frozen=True)
class AgentRunResult:
    answer: AssistantAnswer
    history: tuple[ChatMessage, ...]
    tool_calls_used: int
    json_retries_used: int


def build_system_prompt(user_id: str, instance_url: str, now: date) -> ChatMessage:
    template = (
        resources.files("vaultrag").joinpath(_PROMPT_RESOURCE).read_text(encoding="utf-8")
    )
    text = template.format(
        current_date=now.isoformat(), user_id=user_id, instance_url=instance_url
    )
    return ChatMessage(role="system", content=text)


def tool_specs(search_result_count: int = 8) -> tuple[ToolSpec, ...]:
    return (
        ToolSpec(
            name=TOOL_SEARCH,
            description=(
                "Semantic similarity search over the records the current user may "
                f"read. Takes a query text and returns the {search_result_count} most "
                "similar text chunks, each preceded by a header naming the record id "
                "and whether it came from the record's metadata or from a file. "
                "Chunks are fragments and may start or end mid-sentence; similarity "
                "is approximate, so relevant material can be missing and retrieved "
                "chunks can be off-topic."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "text": {"type": "string", "description": "query text"},
                },
                "required": ["text"],
            },
        ),
        ToolSpec(
            name=TOOL_METADATA,
            description=(
                "Return a record's metadata (identifier, title, description, extras "
                "and file names) for the given record id. Output longer than the "
                "tool limit is truncated, so large records arrive incomplete."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "record_id": {"type": "integer", "description": "record id"},
                },
                "required": ["record_id"],
            },
        ),
        ToolSpec(
            name=TOOL_CONNECTIONS,
            description=(
                "List the links of an object: each link names both endpoints "
                "(type, id, title) and its annotation. Takes the object's id and "
                "its type, 'record' or 'collection'. Long link lists are truncated."
            ),
            parameters={
                "type": "object",
                "properties": {
                    "id": {"type": "integer", "description": "object id"},
                    "type": {
                        "type": "string",
                        "enum": ["record", "collection"],
                        "description": "object type",
                    },
                },
                "required": ["id", "type"],
            },
        ),
    )


def validate_answer(raw: str) -> Union[AssistantAnswer, FormatViolation]:
    """Check the final-answer contract; violations are values, not errors."""
    text = raw.strip()
    fenced = _FENCE_RE.match(text)
    if fenced:
        text = fenced.group(1).strip()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return FormatViolation("reply is not valid JSON")
    if not isinstance(doc, dict):
        return FormatViolation("top level must be a JSON object")
    unexpected = sorted(set(doc) - {"answer", "sources"})
    if unexpected:
        return FormatViolation(f"unexpected field(s): {', '.join(unexpected)}")
    if "answer" not in doc:
        return FormatViolation('missing field "answer"')
    if "sources" not in doc:
        return FormatViolation('missing field "sources"')
    if not isinstance(doc["answer"], str):
        return FormatViolation('"answer" must be a string')
    if not isinstance(doc["sources"], list):
        return FormatViolation('"sources" must be a list')
    sources = []
    for i, item in enumerate(doc["sources"]):
        if not isinstance(item, dict):
            return FormatViolation(f"sources[{i}] must be an object")
        if set(item) != {"record_id", "specifier"}:
            return FormatViolation(
                f'sources[{i}] must have exactly "record_id" and "specifier"'
            )
        record_id = item["record_id"]
        specifier = item["specifier"]
        if not isinstance(record_id, int) or isinstance(record_id, bool):
            return FormatViolation(f"sources[{i}].record_id must be an integer")
        if not isinstance(specifier, str):
            return FormatViolation(f"sources[{i}].specifier must be a string")
        sources.append(AnswerSource(record_id, specifier))
    return AssistantAnswer(doc["answer"], tuple(sources))


def _budget_message(remaining: int, maximum: int) -> ChatMessage:
    return ChatMessage(
        role="system",
        content=f"You have {remaining} tool call(s) remaining out of {maximum}.",
    )


def _violation_message(reason: str) -> ChatMessage:
    return ChatMessage(
        role="system",
        content=(
            f"Your previous reply was rejected: {reason}. Respond with one JSON "
            'object containing exactly "answer" (a string) and "sources" (a list '
            'of {"record_id": <integer>, "specifier": <file name or "metadata">}).'
        ),
    )


class Agent:
    """Executes runs against one repository/retrieval pair.

    Stateless between runs; safe to share across concurrent conversations.
    """

    def __init__(
        self,
        repo: Repository,
        retrieval: RetrievalService,
        chat_model: ChatModel,
        instance_url: str = "http://localhost",
        config: Optional[AgentConfig] = None,
    ):
        self._repo = repo
        self._retrieval = retrieval
        self._chat_model = chat_model
        self._instance_url = instance_url
        self._config = config or AgentConfig()

    # ------------------------------------------------------------------
    # tools
    # ------------------------------------------------------------------

    def execute_tool(self, name: str, arguments: dict, user_id: str) -> ChatMessage:
        """Run one tool under the caller's grants and wrap the result.

        Permission and lookup failures land in the message text so the model
        can see them and adjust; only protocol misuse raises.
        """
        if name == TOOL_SEARCH:
            text = self._search_tool(arguments, user_id)
        elif name == TOOL_METADATA:
            text = self._metadata_tool(arguments, user_id)
        elif name == TOOL_CONNECTIONS:
            text = self._connections_tool(arguments, user_id)
        else:
            raise UnknownTool(name)
        limit = self._config.tool_output_char_limit
        if len(text) > limit:
            text = (
                text[:limit]
                + f"\n[output truncated: full length was {len(text)} characters]"
            )
        return ChatMessage(role="tool", content=text)

    def _search_tool(self, arguments: dict, user_id: str) -> str:
        query = _required_arg(TOOL_SEARCH, arguments, "text", str)
        try:
            outcome = self._retrieval.semantic_search(
                SearchParams(query=query, n=self._config.search_result_count),
                user_id,
            )
        except EmptyQuery:
            return "The search query was empty. Provide a non-empty query text."
        if not outcome.results:
            return "No matching chunks were found among the records you can read."
        parts = []
        for chunk in outcome.results:
            source = "metadata" if chunk.from_metadata else f"file:{chunk.file_name}"
            parts.append(f"record_id={chunk.record_id}, source={source}\n{chunk.text}")
        rendered = "\n\n".join(parts)
        if outcome.degraded:
            rendered += "\n\n[reranker unavailable: results are in first-stage order]"
        return rendered

    def _metadata_tool(self, arguments: dict, user_id: str) -> str:
        record_id = _required_arg(TOOL_METADATA, arguments, "record_id", int)
        try:
            self._repo.get_metadata(record_id, user_id)
        except (Forbidden, NotFound):
            return (
                f"Record {record_id} was not found or you do not have permission "
                "to read it."
            )
        doc = json.loads(self._repo.metadata_document(record_id))
        return pprint.pformat(doc, width=100)

    def _connections_tool(self, arguments: dict, user_id: str) -> str:
        object_id = _required_arg(TOOL_CONNECTIONS, arguments, "id", int)
        object_type = _required_arg(TOOL_CONNECTIONS, arguments, "type", str)
        try:
            links = self._repo.get_connections(object_id, object_type, user_id)
        except InvalidObjectType:
            return (
                f"Invalid object type {object_type!r}: it must be 'record' or "
                "'collection'."
            )
        except (Forbidden, NotFound):
            return (
                f"The {object_type} with id {object_id} was not found or you do "
                "not have permission to read it."
            )
        if not links:
            return f"The {object_type} with id {object_id} has no visible connections."
        entries = [
            {
                "from": self._endpoint(link.from_type, link.from_id),
                "to": self._endpoint(link.to_type, link.to_id),
                "annotation": link.annotation,
            }
            for link in links
        ]
        return pprint.pformat(entries, width=100)

    def _endpoint(self, object_type: ObjectType, object_id: int) -> dict:
        if object_type == ObjectType.record:
            obj = self._repo.get_record(object_id)
        else:
            obj = self._repo.get_collection(object_id)
        return {
            "type": object_type.value,
            "id": object_id,
            "identifier": obj.identifier,
            "title": obj.title,
        }

    # ------------------------------------------------------------------
    # run loop
    # ------------------------------------------------------------------

    def run(
        self,
        history: list[ChatMessage],
        user_id: str,
        now: Optional[date] = None,
    ) -> AgentRunResult:
        if not history or history[-1].role != "user":
            raise ValueError("history must end with a user message")
        state = AgentState(
            history=list(history),
            user_id=user_id,
            instance_url=self._instance_url,
            max_tool_calls=self._config.max_tool_calls,
        )
        if not state.history or state.history[0].role != "system":
            state.history.insert(
                0,
                build_system_prompt(user_id, self._instance_url, now or date.today()),
            )

        specs = tool_specs(self._config.search_result_count)
        last_violation = FormatViolation("no answer produced")
        while True:
            budget_left = state.tool_calls_used < state.max_tool_calls
            offered = specs if budget_left else ()
            try:
                reply = self._chat_model.chat_complete(
                    ChatRequest(messages=tuple(state.history), tools=offered)
                )
            except UpstreamUnavailable as exc:
                raise LlmUnavailable(str(exc)) from exc
            state.history.append(reply)

            if reply.tool_calls and budget_left:
                for call in reply.tool_calls:
                    if state.tool_calls_used >= state.max_tool_calls:
                        state.history.append(
                            ChatMessage(
                                role="tool",
                                content=(
                                    "No tool calls remain; answer with the "
                                    "information already gathered."
                                ),
                                tool_call_id=call.call_id,
                            )
                        )
                        continue
                    try:
                        message = self.execute_tool(call.name, call.arguments, user_id)
                    except (UnknownTool, BadArguments) as exc:
                        message = ChatMessage(role="tool", content=f"Tool error: {exc}")
                    state.history.append(
                        ChatMessage(
                            role="tool",
                            content=message.content,
                            tool_call_id=call.call_id,
                        )
                    )
                    state.tool_calls_used += 1
                    state.history.append(
                        _budget_message(
                            state.max_tool_calls - state.tool_calls_used,
                            state.max_tool_calls,
                        )
                    )
                continue

            if reply.tool_calls:
                # budget is spent and the model was offered no tools; refuse
                # in-band and burn a retry so the loop stays bounded
                for call in reply.tool_calls:
                    state.history.append(
                        ChatMessage(
                            role="tool",
                            content=(
                                "No tool calls remain; answer with the "
                                "information already gathered."
                            ),
                            tool_call_id=call.call_id,
                        )
                    )
                verdict: Union[AssistantAnswer, FormatViolation] = FormatViolation(
                    "a final answer was expected, not a tool call"
                )
            else:
                verdict = validate_answer(reply.content)

            if isinstance(verdict, AssistantAnswer):
                return AgentRunResult(
                    answer=verdict,
                    history=tuple(state.history),
                    tool_calls_used=state.tool_calls_used,
                    json_retries_used=state.json_retries_used,
                )
            last_violation = verdict
            if state.json_retries_used >= self._config.json_retry_limit:
                raise AnswerFormatExhausted(
                    f"no valid answer after {state.json_retries_used + 1} "
                    f"attempt(s): {last_violation.reason}",
                    answer=AssistantAnswer(
                        "I could not produce a correctly formatted answer. "
                        f"Last problem: {last_violation.reason}.",
                        (),
                    ),
                )
            state.json_retries_used += 1
            state.history.append(_violation_message(verdict.reason))


def _required_arg(tool: str, arguments: dict, key: str, expected: type):
    if not isinstance(arguments, dict):
        raise BadArguments(f"{tool}: arguments must be an object")
    if key not in arguments:
        raise BadArguments(f"{tool}: missing argument {key!r}")
    value = arguments[key]
    if not isinstance(value, expected) or (
        expected is int and isinstance(value, bool)
    ):
        raise BadArguments(
            f"{tool}: argument {key!r} must be of type {expected.__name__}"
        )
    return value

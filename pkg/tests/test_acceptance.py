"""Top-level acceptance checks: one test per shipped guarantee.

Heavy index builds are session-scoped and shared where the guarantees
allow it:

- recall-vs-oracle builds its own 10k corpus at stock index parameters,
  because that guarantee is about the defaults;
- the latency-shape, regime-contrast, and memory-linearity checks share
  one incremental 100k build at an explicit narrow-beam setting
  (ef_construction=100, ef_search=100) so the beam stays far below every
  checkpoint and the 100k construction finishes inside the time budget.

Each fixture returns plain numbers and drops the index so the memory is
returned before later tests run.
"""

import json
import re
import time
from dataclasses import dataclass, field
from datetime import date

import numpy as np
import pytest
from fastapi.testclient import TestClient

from test_agent import (
    KADI_FILE,
    KADI_TITLE,
    answer_turn,
    budget_messages,
    build_stack,
    make_agent,
    tool_turn,
    user_turn,
)
from test_chunking import assert_chunks_cover_document, iter_leaves

from vaultrag.agent import (
    AnswerSource,
    TOOL_CONNECTIONS,
    TOOL_METADATA,
    TOOL_SEARCH,
)
from vaultrag.api import ServiceConfig, create_app
from vaultrag.bench import (
    extend_index,
    fit_linear,
    fit_linear_through_origin,
    fit_logarithmic,
    generate_corpus,
    measure_latency_point,
    relabel_fixed_two,
    relabel_per_record,
)
from vaultrag.chunking import ChunkingConfig, split_code, split_json, split_plain
from vaultrag.errors import AnswerFormatExhausted
from vaultrag.fixtures import lisa_corpus, polis_corpus, breathing_corpus, install
from vaultrag.gateway import ChatMessage, HashingEmbedder, JaccardReranker, ScriptedChatModel
from vaultrag.hnsw import ChunkRow, HnswIndex, HnswParams
from vaultrag.repository import Capability, MediaKind, Repository
from vaultrag.retrieval import RetrievalService, vector_table_signature


# ---------------------------------------------------------------------------
# shared heavy fixtures
# ---------------------------------------------------------------------------


@dataclass
class RecallResults:
    mean_by_fraction: dict
    elapsed_s: float


@pytest.fixture(scope="session")
def default_recall():
    """10k uniform dim-1024 corpus at stock parameters; mean recall per
    access fraction against the exact oracle."""
    started = time.perf_counter()
    corpus = generate_corpus(10_000, 1024, seed=0)
    index = HnswIndex(HnswParams())
    extend_index(index, corpus, 0, 10_000)
    del corpus
    means = {}
    for fraction in (0.01, 0.1, 1.0):
        grants = relabel_fixed_two(index, 10_000, fraction)
        rng = np.random.default_rng(1)
        recalls = []
        for _ in range(100):
            q = rng.standard_normal(1024).astype(np.float32)
            q /= np.linalg.norm(q)
            got = {n.id for n in index.knn_filtered(q, 50, grants)}
            exact = {n.id for n in index.brute_force_knn(q, 50, grants)}
            recalls.append(len(got & exact) / len(exact))
        means[fraction] = float(np.mean(recalls))
    return RecallResults(means, time.perf_counter() - started)


@dataclass
class ScalingResults:
    latency_mean_s: dict = field(default_factory=dict)   # n -> mean seconds
    memory: dict = field(default_factory=dict)           # n -> memory_report()
    contrast: dict = field(default_factory=dict)         # vectors/record -> mean s
    shape_elapsed_s: float = 0.0
    contrast_elapsed_s: float = 0.0


@pytest.fixture(scope="session")
def scaling():
    """One incremental dim-1024 build to 100k rows; all scaling
    measurements are taken as the build passes each checkpoint, then the
    same rows are relabelled for the records-layout contrast."""
    params = HnswParams(ef_construction=100, ef_search=100)
    results = ScalingResults()
    started = time.perf_counter()
    corpus = generate_corpus(100_000, 1024, seed=0)
    index = HnswIndex(params)
    inserted = 0
    for n in (1_000, 10_000, 50_000, 100_000):
        extend_index(index, corpus, inserted, n)
        inserted = n
        if n in (10_000, 50_000, 100_000):
            results.memory[n] = index.memory_report()
        if n in (1_000, 10_000, 100_000):
            grants = relabel_fixed_two(index, n, 1.0)
            point = measure_latency_point(
                index, grants, mode="fixed_two", n=n, fraction=1.0, k=50,
                trials=100, rng=np.random.default_rng(n), oracle_sample_rate=0.0,
            )
            results.latency_mean_s[n] = point.mean_latency_s
    del corpus
    results.shape_elapsed_s = time.perf_counter() - started

    started = time.perf_counter()
    for vectors_per_record in (10, 1_000):
        grants = relabel_per_record(index, 100_000, vectors_per_record, 1.0)
        point = measure_latency_point(
            index, grants, mode="vectors_per_record", n=100_000, fraction=1.0,
            k=50, trials=100, rng=np.random.default_rng(7), oracle_sample_rate=0.0,
        )
        results.contrast[vectors_per_record] = point.mean_latency_s
    results.contrast_elapsed_s = time.perf_counter() - started
    return results


@pytest.fixture(scope="module")
def lisa_stack():
    return build_stack(lisa_corpus())


@pytest.fixture(scope="module")
def polis_stack():
    return build_stack(polis_corpus())


@pytest.fixture(scope="module")
def breathing_stack():
    return build_stack(breathing_corpus())


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def test_criterion_01_filter_soundness():
    """1,000 randomized ACL trials never return a record outside the
    allowed set."""
    started = time.perf_counter()
    n, dim, records = 5_000, 64, 200
    corpus = generate_corpus(n, dim, seed=9)
    # narrow beam keeps 1,000 queries fast; soundness is a structural
    # property of the emission filter and must hold at any beam width
    index = HnswIndex(HnswParams(dim=dim, ef_search=100))
    for i in range(n):
        index.insert(ChunkRow(id=i + 1, record_id=i % records + 1,
                              from_metadata=False, file_name=None,
                              embedding=corpus[i], text=""))
    rng = np.random.default_rng(10)
    for trial in range(1_000):
        size = int(rng.integers(0, records + 1))
        allowed = set(rng.choice(records, size=size, replace=False) + 1)
        k = int(rng.integers(1, 101))
        q = rng.standard_normal(dim).astype(np.float32)
        q /= np.linalg.norm(q)
        found = index.knn_filtered(q, k, allowed)
        if not allowed:
            assert found == [], f"trial {trial}: results from an empty ACL"
            continue
        outside = [nb.id for nb in found
                   if index.get_row(nb.id).record_id not in allowed]
        assert not outside, f"trial {trial}: ids {outside} outside the ACL"
    elapsed = time.perf_counter() - started
    assert elapsed < 60, f"soundness sweep took {elapsed:.1f}s (budget 60s)"


def test_criterion_02_recall_vs_oracle(default_recall):
    """Mean recall at k=50 stays at or above 0.9 for every access fraction
    at stock index parameters."""
    for fraction, mean in sorted(default_recall.mean_by_fraction.items()):
        assert mean >= 0.9, (
            f"fraction {fraction}: mean recall {mean:.4f} < 0.9 "
            f"(all: {default_recall.mean_by_fraction})"
        )
    assert default_recall.elapsed_s < 300, (
        f"recall experiment took {default_recall.elapsed_s:.0f}s (budget 300s)"
    )
    print(f"recall by fraction: {default_recall.mean_by_fraction}, "
          f"elapsed {default_recall.elapsed_s:.0f}s")


def test_criterion_03_latency_shape_fixed_two(scaling):
    """Across 1k/10k/100k with full access, mean latency follows a
    logarithmic curve better than a straight line through the origin."""
    ns = sorted(scaling.latency_mean_s)
    ys = [scaling.latency_mean_s[n] for n in ns]
    log_fit = fit_logarithmic(ns, ys)
    origin_fit = fit_linear_through_origin(ns, ys)
    assert log_fit.r_squared > origin_fit.r_squared, (
        f"log R2 {log_fit.r_squared:.4f} <= linear-origin R2 "
        f"{origin_fit.r_squared:.4f}; latencies {dict(zip(ns, ys))}"
    )
    assert scaling.shape_elapsed_s < 900, (
        f"shape experiment took {scaling.shape_elapsed_s:.0f}s (budget 900s)"
    )
    print(f"latency ms: {({n: y * 1000 for n, y in zip(ns, ys)})}, "
          f"log R2 {log_fit.r_squared:.4f} vs origin R2 {origin_fit.r_squared:.4f}")


def test_criterion_04_latency_regime_contrast(scaling):
    """At 100k rows and equal access fraction, 10 vectors/record costs more
    per query than 1000 vectors/record."""
    v10 = scaling.contrast[10]
    v1000 = scaling.contrast[1_000]
    assert v10 > v1000, (
        f"10 vectors/record {v10 * 1000:.3f} ms !> "
        f"1000 vectors/record {v1000 * 1000:.3f} ms"
    )
    print(f"contrast at 100k: v/r=10 {v10*1000:.3f} ms, v/r=1000 {v1000*1000:.3f} ms")


def test_criterion_05_memory_linearity(scaling):
    """Graph and total bytes grow as ax+b (b >= 0) with R2 >= 0.99 over
    10k/50k/100k; per-vector cost is reported beside the 7.5 and 13.7
    kB/vector reference figures without asserting equality."""
    ns = sorted(scaling.memory)
    for series in ("graph_bytes", "total_bytes"):
        fit = fit_linear(ns, [scaling.memory[n][series] for n in ns],
                         nonnegative_intercept=True)
        assert fit.b >= 0.0, f"{series}: negative intercept {fit.b}"
        assert fit.r_squared >= 0.99, (
            f"{series}: R2 {fit.r_squared:.5f} < 0.99 "
            f"(points {[scaling.memory[n][series] for n in ns]})"
        )
    n = ns[-1]
    graph_kb = scaling.memory[n]["graph_bytes"] / n / 1024
    total_kb = scaling.memory[n]["total_bytes"] / n / 1024
    print(f"memory at {n}: graph {graph_kb:.2f} kB/vector (reference 7.5), "
          f"total {total_kb:.2f} kB/vector (reference 13.7)")
    assert graph_kb > 0 and total_kb > 0


def _seeded_fifty_records(repo):
    repo.add_user("alice")
    created = []
    for i in range(50):
        rec = repo.create_record(f"Series {i}", f"series-{i:03d}", {"i": i},
                                 owner="alice")
        repo.upload_file(rec.record_id, "notes.txt", MediaKind.plain_text,
                         f"baseline notes for series {i}. " .encode() * 4,
                         caller="alice")
        created.append(rec.record_id)
    return created


def _replay_random_events(repo, created, rng, steps):
    """Random create/update/delete churn against a live repository."""
    bodies = [
        b"alpha beta gamma measurement series. " * 6,
        b"velocity pressure sensor log entries. " * 5,
        b"short note",
        b'{"config": {"threshold": 5, "mode": "auto"}}',
    ]
    for step in range(steps):
        roll = rng.random()
        if created and roll < 0.15:
            rid = created.pop(int(rng.integers(len(created))))
            repo.delete_record(rid, caller="alice")
        elif created and roll < 0.5:
            rid = created[int(rng.integers(len(created)))]
            if rng.random() < 0.4:
                repo.update_metadata(rid, caller="alice", title=f"Updated {step}")
            else:
                body = bodies[int(rng.integers(len(bodies)))]
                kind = MediaKind.json if body.startswith(b"{") else MediaKind.plain_text
                repo.upload_file(rid, f"f{int(rng.integers(3))}.txt", kind,
                                 body, caller="alice")
        elif created and roll < 0.6:
            rid = created[int(rng.integers(len(created)))]
            rec = repo.get_record(rid)
            if rec.files:
                repo.delete_file(rid, sorted(rec.files)[0], caller="alice")
        else:
            rec = repo.create_record(f"Churn {step}", f"churn-{step}",
                                     {"step": step}, owner="alice")
            created.append(rec.record_id)


def test_criterion_06_sync_equivalence():
    """After 200 random events on a 50-record fixture, the incrementally
    synced vector table equals a from-scratch rebuild exactly."""
    dim = 64
    chunking = ChunkingConfig(max_chunk_chars=200, overlap_chars=20,
                              json_max_chunk_chars=200)

    repo = Repository()
    index = HnswIndex(HnswParams(dim=dim))
    service = RetrievalService(repo, index, HashingEmbedder(dim=dim),
                               JaccardReranker(), chunking=chunking)
    created = _seeded_fifty_records(repo)
    service.bootstrap()
    repo.add_listener(service.process_sync_event)
    _replay_random_events(repo, created, np.random.default_rng(2026), steps=200)

    rebuilt = HnswIndex(HnswParams(dim=dim))
    rebuild = RetrievalService(repo, rebuilt, HashingEmbedder(dim=dim),
                               JaccardReranker(), chunking=chunking)
    rebuild.bootstrap()
    live = vector_table_signature(index)
    fresh = vector_table_signature(rebuilt)
    assert live == fresh, (
        f"live-only rows: {sorted(live - fresh)[:5]}, "
        f"rebuild-only rows: {sorted(fresh - live)[:5]}"
    )


_WORDS = ("sensor", "voltage", "cycle", "anode", "spectrum", "layer",
          "grain", "flux", "probe", "drift")


def _random_plain(rng):
    paragraphs = []
    for _ in range(int(rng.integers(1, 5))):
        sentences = []
        for _ in range(int(rng.integers(1, 6))):
            words = rng.choice(_WORDS, size=int(rng.integers(3, 12)))
            sentences.append(" ".join(words) + ".")
        paragraphs.append(" ".join(sentences))
    return "\n\n".join(paragraphs)


def _random_code(rng):
    lines = []
    for i in range(int(rng.integers(1, 40))):
        indent = " " * int(rng.integers(0, 3)) * 4
        name = str(rng.choice(_WORDS))
        if rng.random() < 0.1:
            lines.append(indent + name + "_" + "x" * int(rng.integers(100, 300)))
        else:
            lines.append(f"{indent}{name} = {int(rng.integers(0, 999))}")
        if rng.random() < 0.2:
            lines.append("")
    return "\n".join(lines) + "\n"


def _random_json(rng, depth=3):
    roll = rng.random()
    if depth == 0 or roll < 0.4:
        kind = int(rng.integers(0, 4))
        if kind == 0:
            return int(rng.integers(-1000, 1000))
        if kind == 1:
            return bool(rng.integers(0, 2))
        if kind == 2:
            return None
        return " ".join(rng.choice(_WORDS, size=int(rng.integers(0, 20))))
    if roll < 0.7:
        return {str(rng.choice(_WORDS)) + str(i): _random_json(rng, depth - 1)
                for i in range(int(rng.integers(1, 5)))}
    return [_random_json(rng, depth - 1) for _ in range(int(rng.integers(1, 5)))]


def test_criterion_07_chunker_properties():
    """500 random documents: exact round-trip for plain/code at zero
    overlap, JSON chunks stay parseable and cover every leaf path, and no
    chunk exceeds the limit except a single-leaf overflow."""
    rng = np.random.default_rng(17)
    for doc_index in range(500):
        kind = doc_index % 3
        if kind == 0:
            text = _random_plain(rng)
            limit = int(rng.integers(50, 400))
            chunks = split_plain(text, limit, 0)
            assert "".join(chunks) == text, f"doc {doc_index}: plain round-trip"
            assert all(len(c) <= limit for c in chunks), f"doc {doc_index}"
        elif kind == 1:
            text = _random_code(rng)
            limit = int(rng.integers(50, 400))
            chunks = split_code(text, limit, 0)
            assert "".join(chunks) == text, f"doc {doc_index}: code round-trip"
            assert all(len(c) <= limit for c in chunks), f"doc {doc_index}"
        else:
            text = json.dumps(_random_json(rng))
            limit = int(rng.integers(60, 300))
            chunks = split_json(text, limit)
            for chunk in chunks:
                parsed = json.loads(chunk)
                if len(chunk) > limit:
                    leaves = list(iter_leaves(parsed))
                    assert len(leaves) == 1, (
                        f"doc {doc_index}: oversized chunk with "
                        f"{len(leaves)} leaves is not the atomic case"
                    )
            assert_chunks_cover_document(text, chunks)
            want = {path for path, _ in iter_leaves(json.loads(text))}
            got = set()
            for chunk in chunks:
                got |= {path for path, _ in iter_leaves(json.loads(chunk))}
            assert got == want, f"doc {doc_index}: leaf-path set changed"


def test_criterion_08_agent_trace_replays(lisa_stack, polis_stack, breathing_stack):
    """Scripted conversations replay the reference tool-call traces with
    the exact budget strings, deterministically."""
    started = time.perf_counter()

    def single_call_run():
        script = [
            tool_turn(TOOL_SEARCH, {"text": KADI_TITLE}),
            answer_turn(f'The paper is file "{KADI_FILE}" in record 1.',
                        [{"record_id": 1, "specifier": KADI_FILE}]),
        ]
        agent, model = make_agent(lisa_stack, script)
        result = agent.run(
            [user_turn(f"Can you locate the paper '{KADI_TITLE}'?")],
            "alice", now=date(2026, 8, 23),
        )
        return result, model

    # (a) one tool call resolving to the known file, (e) exact budget string
    result, _ = single_call_run()
    assert result.tool_calls_used == 1
    assert result.answer.sources == (AnswerSource(1, KADI_FILE),)
    assert result.history[4].content == "You have 4 tool call(s) remaining out of 5."

    # deterministic: an identical rerun produces an identical transcript
    rerun, _ = single_call_run()
    assert rerun == result

    # (b) three-call link chase with both metadata sources
    script = [
        tool_turn(TOOL_SEARCH, {"text": "DFT Solver"}, call_id="call_1"),
        tool_turn(TOOL_CONNECTIONS, {"id": 14, "type": "record"}, call_id="call_2"),
        tool_turn(TOOL_METADATA, {"record_id": 13}, call_id="call_3"),
        answer_turn("Record 14 is the solver; raw results are in record 13.",
                    [{"record_id": 14, "specifier": "metadata"},
                     {"record_id": 13, "specifier": "metadata"}]),
    ]
    agent, _ = make_agent(polis_stack, script)
    result = agent.run(
        [user_turn("Find a DFT Solver and any simulation results attached to it.")],
        "alice",
    )
    assert result.tool_calls_used == 3
    assert result.answer.sources == (AnswerSource(14, "metadata"),
                                     AnswerSource(13, "metadata"))

    # (c) four-call dataset chase citing record 3
    script = [
        tool_turn(TOOL_SEARCH, {"text": "breathing detection models dataset"}),
        tool_turn(TOOL_CONNECTIONS, {"id": 369, "type": "record"}),
        tool_turn(TOOL_CONNECTIONS, {"id": 279, "type": "record"}),
        tool_turn(TOOL_METADATA, {"record_id": 3}),
        answer_turn("The training dataset is record 3 "
                    "('cids-breathing-detection-tfrecords').",
                    [{"record_id": 279, "specifier": "metadata"},
                     {"record_id": 3, "specifier": "metadata"}]),
    ]
    agent, _ = make_agent(breathing_stack, script)
    result = agent.run(
        [user_turn("Locate the dataset the breathing detection models were trained on.")],
        "alice",
    )
    assert result.tool_calls_used == 4
    assert any(source.record_id == 3 for source in result.answer.sources)

    # (d) six requested calls are capped at five; turns 6 and 7 get no tools
    script = [
        tool_turn(TOOL_METADATA, {"record_id": 13}, call_id=f"call_{i}")
        for i in range(1, 7)
    ] + [answer_turn("Out of budget.", [{"record_id": 13, "specifier": "metadata"}])]
    agent, model = make_agent(polis_stack, script)
    result = agent.run([user_turn("Tell me everything about record 13.")], "alice")
    assert result.tool_calls_used == 5
    notices = budget_messages(result.history)
    assert len(notices) == 5
    assert notices[-1] == "You have 0 tool call(s) remaining out of 5."
    assert model.requests[5].tools == ()
    assert model.requests[6].tools == ()

    elapsed = time.perf_counter() - started
    assert elapsed < 30, f"trace replays took {elapsed:.1f}s (budget 30s)"


def test_criterion_09_answer_format_gate(polis_stack):
    """A malformed answer retried into a valid one is accepted; three
    malformed answers exhaust the gate. Both outcomes replay identically."""
    def accepted_run():
        script = [
            ChatMessage(role="assistant", content="here: record 14, trust me"),
            answer_turn("Record 14.", [{"record_id": 14, "specifier": "metadata"}]),
        ]
        agent, _ = make_agent(polis_stack, script)
        return agent.run([user_turn("Find the solver.")], "alice",
                         now=date(2026, 8, 23))

    result = accepted_run()
    assert result.answer.answer == "Record 14."
    assert result.json_retries_used == 1
    assert accepted_run() == result

    def exhausted_run():
        script = [
            ChatMessage(role="assistant", content=bad)
            for bad in ("not json", '{"answer": 5}', '["still", "wrong"]')
        ]
        agent, _ = make_agent(polis_stack, script)
        with pytest.raises(AnswerFormatExhausted) as excinfo:
            agent.run([user_turn("Find the solver.")], "alice",
                      now=date(2026, 8, 23))
        return excinfo.value

    error = exhausted_run()
    assert error.answer.sources == ()
    assert str(exhausted_run()) == str(error)


_ID_PATTERNS = (
    re.compile(r"record_id['\"]?[=:]\s*'?(\d+)"),
    re.compile(r"'id': (\d+)"),
)


def _surfaced_record_ids(trace):
    ids = set()
    for message in trace:
        if message["role"] != "tool":
            continue
        for pattern in _ID_PATTERNS:
            ids |= {int(m) for m in pattern.findall(message["content"])}
    return ids


def test_criterion_10_end_to_end_privacy():
    """Two users whose grants partition the corpus ask the same question;
    neither's chat trace or sources ever mention the other's records."""
    repo = Repository()
    install(repo, polis_corpus())
    # the fixture owner keeps its grants; bob and carol get disjoint halves
    bob_records = set(range(1, 9))
    carol_records = set(range(9, 17))
    for user, records in (("bob", bob_records), ("carol", carol_records)):
        repo.add_user(user)
        for rid in records:
            repo.grant(user, rid, Capability.read)

    script = [
        # bob's turns, then carol's: one shared scripted model, called in order
        tool_turn(TOOL_SEARCH, {"text": "simulation results"}),
        answer_turn("See record 3.", [{"record_id": 3, "specifier": "metadata"}]),
        tool_turn(TOOL_SEARCH, {"text": "simulation results"}),
        answer_turn("See record 13.", [{"record_id": 13, "specifier": "metadata"}]),
    ]
    config = ServiceConfig(dim=64, workers=1,
                           tokens={"bob": "tok-bob", "carol": "tok-carol"})
    app = create_app(config, repo=repo,
                     embedder=HashingEmbedder(dim=64),
                     reranker=JaccardReranker(),
                     chat_model=ScriptedChatModel(turns=script))

    question = {"messages": [{"role": "user",
                              "content": "Where are the simulation results?"}]}
    with TestClient(app) as client:
        seen = {}
        for user in ("bob", "carol"):
            response = client.post(
                "/api/chat?debug=1", json=question,
                headers={"Authorization": f"Bearer tok-{user}"},
            )
            assert response.status_code == 200, response.text
            seen[user] = response.json()

    for user, own, other in (("bob", bob_records, carol_records),
                             ("carol", carol_records, bob_records)):
        surfaced = _surfaced_record_ids(seen[user]["trace"])
        assert surfaced, f"{user}: no tool output captured in the trace"
        assert surfaced <= own, (
            f"{user}: tool messages surfaced foreign ids {sorted(surfaced - own)}"
        )
        cited = {source["record_id"] for source in seen[user]["sources"]}
        assert cited <= own and not cited & other, (
            f"{user}: sources cite foreign records {sorted(cited & other)}"
        )

"""HTTP service tests: search, feedback, refinement jobs, durability, images."""

import io
import json
import threading
import time
from collections import defaultdict
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from PIL import Image

import celestial.service as service_mod
from celestial.checkpoint import checkpoint_digest, load_checkpoint
from celestial.dataset import MANIFEST_HEADER
from celestial.model import DenseHead, state_bytes
from celestial.service import (
    ServiceState,
    _head_from_bytes,
    _head_to_bytes,
    create_app,
)

ALPHA = 0.5


@pytest.fixture(scope="module")
def env(toy, tmp_path_factory):
    state_dir = tmp_path_factory.mktemp("service-state")
    featurizer = load_checkpoint(toy.featurizer(0))
    app = create_app(toy.manifest, featurizer, state_dir, alpha=ALPHA)
    return SimpleNamespace(
        client=TestClient(app),
        state=app.state.service,
        toy=toy,
        state_dir=state_dir,
    )


def new_session(env, k: int = 1) -> str:
    query = env.toy.manifest.entries[0].id
    reply = env.client.post("/api/search", json={"image_id": query, "k": k})
    assert reply.status_code == 200
    return reply.json()["session_id"]


def ids_by_class(manifest) -> dict[int, list[str]]:
    grouped = defaultdict(list)
    for entry in manifest.entries:
        grouped[entry.label].append(entry.id)
    return grouped


def wait_for_job(client, job_id: str, timeout: float = 60.0) -> dict:
    deadline = time.time() + timeout
    while time.time() < deadline:
        body = client.get(f"/api/jobs/{job_id}").json()
        if body["status"] in ("done", "failed"):
            return body
        time.sleep(0.05)
    raise AssertionError(f"job {job_id} did not reach a terminal state")


def log_lines(env) -> list[dict]:
    path = env.state_dir / "events.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


class TestStatus:
    def test_reports_corpus_and_checkpoint(self, env):
        body = env.client.get("/api/status").json()
        assert body["checkpoint_digest"] == checkpoint_digest(env.toy.featurizer(0))
        assert body["checkpoint_digest"] == checkpoint_digest(
            env.state_dir / "base_featurizer.ckpt"
        )
        assert body["index_size"] == len(env.toy.manifest.entries)
        assert body["embedding_dim"] == 64
        assert body["num_classes"] == 8
        assert body["image_size"] == [64, 64]
        assert body["alpha"] == ALPHA
        assert body["uptime_seconds"] >= 0.0


class TestSearch:
    def test_id_query_self_match_first(self, env):
        query = env.toy.manifest.entries[3].id
        reply = env.client.post("/api/search", json={"image_id": query, "k": 5})
        assert reply.status_code == 200
        body = reply.json()
        assert body["generation"] == 0
        assert body["k"] == 5
        assert len(body["results"]) == 5
        top = body["results"][0]
        assert top["id"] == query
        assert top["similarity"] == pytest.approx(1.0, abs=1e-6)
        assert top["relevance"] is None  # no refinement yet
        assert top["thumbnail"] == f"/api/images/{query}?size=128"
        scores = [r["score"] for r in body["results"]]
        assert scores == sorted(scores, reverse=True)

    def test_matches_cosine_oracle(self, env):
        state = env.state
        query = env.toy.manifest.entries[17].id
        q = state.embeddings[state.row_of[query]]
        sims = state.index.vectors @ (q / np.linalg.norm(q))
        expected = sorted(range(len(state.ids)), key=lambda i: (-sims[i], state.ids[i]))
        reply = env.client.post("/api/search", json={"image_id": query, "k": 10})
        got = [r["id"] for r in reply.json()["results"]]
        assert got == [state.ids[i] for i in expected[:10]]

    def test_k_larger_than_corpus_returns_all(self, env):
        query = env.toy.manifest.entries[0].id
        reply = env.client.post("/api/search", json={"image_id": query, "k": 10_000})
        assert len(reply.json()["results"]) == len(env.toy.manifest.entries)

    def test_exclude_self(self, env):
        query = env.toy.manifest.entries[0].id
        reply = env.client.post(
            "/api/search", json={"image_id": query, "k": 8, "exclude_self": True}
        )
        body = reply.json()
        assert len(body["results"]) == 8
        assert query not in {r["id"] for r in body["results"]}

    def test_session_accumulates_queries(self, env):
        a, b = env.toy.manifest.entries[0].id, env.toy.manifest.entries[1].id
        sid = env.client.post("/api/search", json={"image_id": a, "k": 1}).json()["session_id"]
        env.client.post("/api/search", json={"image_id": b, "k": 1, "session_id": sid})
        session = env.client.get(f"/api/sessions/{sid}").json()
        assert session["queries"] == [a, b]

    def test_upload_search_finds_source_image(self, env):
        entry = env.toy.manifest.entries[42]
        data = (env.toy.corpus_dir / entry.path).read_bytes()
        reply = env.client.post(
            "/api/search", files={"file": ("q.png", data, "image/png")}, data={"k": "3"}
        )
        assert reply.status_code == 200
        body = reply.json()
        assert body["results"][0]["id"] == entry.id
        assert body["results"][0]["similarity"] == pytest.approx(1.0, abs=1e-4)
        session = env.client.get(f"/api/sessions/{body['session_id']}").json()
        assert session["queries"][0].startswith("upload:")

    def test_error_statuses(self, env):
        client = env.client
        ok = env.toy.manifest.entries[0].id
        assert client.post("/api/search", json={"image_id": "nope"}).status_code == 404
        assert client.post("/api/search", json={}).status_code == 400
        assert client.post("/api/search", json={"image_id": ok, "k": 0}).status_code == 400
        assert client.post("/api/search", json={"image_id": ok, "k": "x"}).status_code == 400
        assert (
            client.post(
                "/api/search", json={"image_id": ok, "session_id": "ghost"}
            ).status_code
            == 404
        )
        assert (
            client.post(
                "/api/search", content=b"[1, 2]", headers={"content-type": "application/json"}
            ).status_code
            == 400
        )
        assert (
            client.post(
                "/api/search", content=b"not json", headers={"content-type": "application/json"}
            ).status_code
            == 400
        )
        assert (
            client.post(
                "/api/search", files={"file": ("q.png", b"junk bytes", "image/png")}
            ).status_code
            == 400
        )
        assert (
            client.post("/api/search", files={"other": ("q.png", b"x", "image/png")}).status_code
            == 400
        )


class TestFeedback:
    def test_round_trip_and_dedupe(self, env):
        sid = new_session(env)
        item = env.toy.manifest.entries[5].id
        verdict = {"session_id": sid, "item_id": item, "verdict": "approve"}
        assert env.client.post("/api/feedback", json=verdict).status_code == 204
        before = len(log_lines(env))
        # identical repeat is a no-op: no new event appended
        assert env.client.post("/api/feedback", json=verdict).status_code == 204
        assert len(log_lines(env)) == before
        # changing the verdict is recorded; last write wins
        verdict["verdict"] = "decline"
        assert env.client.post("/api/feedback", json=verdict).status_code == 204
        assert len(log_lines(env)) == before + 1
        session = env.client.get(f"/api/sessions/{sid}").json()
        assert session["feedback"] == {item: "decline"}

    def test_error_statuses(self, env):
        sid = new_session(env)
        item = env.toy.manifest.entries[0].id
        bad = {"session_id": sid, "item_id": item, "verdict": "maybe"}
        assert env.client.post("/api/feedback", json=bad).status_code == 400
        assert (
            env.client.post(
                "/api/feedback",
                json={"session_id": "ghost", "item_id": item, "verdict": "approve"},
            ).status_code
            == 404
        )
        assert (
            env.client.post(
                "/api/feedback",
                json={"session_id": sid, "item_id": "ghost", "verdict": "approve"},
            ).status_code
            == 404
        )


class TestRefinement:
    def test_requires_both_verdicts(self, env):
        sid = new_session(env)
        item = env.toy.manifest.entries[0].id
        env.client.post(
            "/api/feedback", json={"session_id": sid, "item_id": item, "verdict": "approve"}
        )
        reply = env.client.post("/api/refine", json={"session_id": sid})
        assert reply.status_code == 409
        assert env.client.post("/api/refine", json={"session_id": "ghost"}).status_code == 404

    def test_job_runs_and_improves_ranking(self, env):
        grouped = ids_by_class(env.toy.manifest)
        target, other = 3, 5
        query = grouped[target][0]
        corpus_size = len(env.toy.manifest.entries)

        def mean_rank(results: list[dict]) -> float:
            position = {r["id"]: i for i, r in enumerate(results)}
            return float(np.mean([position[i] for i in grouped[target]]))

        reply = env.client.post("/api/search", json={"image_id": query, "k": corpus_size})
        sid = reply.json()["session_id"]
        rank_before = mean_rank(reply.json()["results"])

        approved = grouped[target][1:6]
        declined = grouped[other][:5]
        for item, verdict in [(i, "approve") for i in approved] + [
            (i, "decline") for i in declined
        ]:
            env.client.post(
                "/api/feedback", json={"session_id": sid, "item_id": item, "verdict": verdict}
            )
        reply = env.client.post("/api/refine", json={"session_id": sid})
        assert reply.status_code == 202
        job = wait_for_job(env.client, reply.json()["job_id"])
        assert job["status"] == "done"
        assert [s for s, _ in job["transitions"]] == ["queued", "running", "done"]
        assert (env.state_dir / "snapshots" / f"{job['snapshot_id']}.bin").is_file()

        reply = env.client.post(
            "/api/search", json={"image_id": query, "k": corpus_size, "session_id": sid}
        )
        body = reply.json()
        assert body["generation"] == 1
        for row in body["results"]:
            assert row["relevance"] is not None
            blended = (1 - ALPHA) * row["similarity"] + ALPHA * row["relevance"]
            assert row["score"] == pytest.approx(blended, abs=1e-9)
        relevance = {r["id"]: r["relevance"] for r in body["results"]}
        assert all(relevance[i] > 0.9 for i in approved)
        assert all(relevance[i] < 0.1 for i in declined)
        rank_after = mean_rank(body["results"])
        assert rank_after < rank_before

        # the featurizer is frozen: refinement trains only the session head
        assert state_bytes(env.state.featurizer) == env.state.base_bytes

    def test_single_flight(self, env, monkeypatch):
        release = threading.Event()
        original = service_mod._train_relevance_head

        def gated(*args, **kwargs):
            release.wait(timeout=30)
            return original(*args, **kwargs)

        monkeypatch.setattr(service_mod, "_train_relevance_head", gated)
        grouped = ids_by_class(env.toy.manifest)
        sid = new_session(env)
        for item, verdict in [(grouped[0][0], "approve"), (grouped[1][0], "decline")]:
            env.client.post(
                "/api/feedback", json={"session_id": sid, "item_id": item, "verdict": verdict}
            )
        first = env.client.post("/api/refine", json={"session_id": sid})
        assert first.status_code == 202
        second = env.client.post("/api/refine", json={"session_id": sid})
        assert second.status_code == 409
        release.set()
        assert wait_for_job(env.client, first.json()["job_id"])["status"] == "done"

    def test_unknown_job_404(self, env):
        assert env.client.get("/api/jobs/ghost").status_code == 404
        assert env.client.get("/api/sessions/ghost").status_code == 404


class TestExport:
    def test_manifest_of_approved_items(self, env):
        sid = new_session(env)
        entries = [env.toy.manifest.entries[i] for i in (9, 2, 6)]
        for entry in entries:
            env.client.post(
                "/api/feedback",
                json={"session_id": sid, "item_id": entry.id, "verdict": "approve"},
            )
        declined = env.toy.manifest.entries[11]
        env.client.post(
            "/api/feedback",
            json={"session_id": sid, "item_id": declined.id, "verdict": "decline"},
        )
        reply = env.client.get(f"/api/sessions/{sid}/export")
        assert reply.status_code == 200
        assert "attachment" in reply.headers["content-disposition"]
        lines = reply.text.splitlines()
        assert lines[0] == MANIFEST_HEADER
        assert lines[1] == ",".join(env.toy.manifest.class_names)
        listed = [line.split("\t")[0] for line in lines[2:]]
        assert listed == sorted(e.id for e in entries)
        assert declined.id not in listed


class TestImages:
    def test_raw_bytes_match_disk(self, env):
        entry = env.toy.manifest.entries[7]
        reply = env.client.get(f"/api/images/{entry.id}")
        assert reply.status_code == 200
        assert reply.headers["content-type"] == "image/png"
        assert reply.content == (env.toy.corpus_dir / entry.path).read_bytes()

    def test_thumbnail_is_resized_png(self, env):
        entry = env.toy.manifest.entries[7]
        reply = env.client.get(f"/api/images/{entry.id}", params={"size": 16})
        image = Image.open(io.BytesIO(reply.content))
        assert image.size == (16, 16)
        assert image.format == "PNG"

    def test_error_statuses(self, env):
        assert env.client.get("/api/images/ghost").status_code == 404
        entry = env.toy.manifest.entries[0]
        assert env.client.get(f"/api/images/{entry.id}", params={"size": 0}).status_code == 400
        assert env.client.get(f"/api/images/{entry.id}", params={"size": 513}).status_code == 400


class TestHeadSnapshots:
    def test_serialization_round_trip(self):
        torch.manual_seed(0)
        head = DenseHead(8, 4, 2)
        clone = _head_from_bytes(_head_to_bytes(head), 8)
        x = torch.randn(5, 8)
        with torch.no_grad():
            assert torch.equal(head(x), clone(x))

    def test_content_addressing_is_stable(self):
        torch.manual_seed(1)
        head = DenseHead(8, 4, 2)
        assert _head_to_bytes(head) == _head_to_bytes(head)


class TestDurability:
    def test_restart_replays_sessions_and_heads(self, env, toy, tmp_path):
        grouped = ids_by_class(toy.manifest)
        query = grouped[2][0]
        reply = env.client.post("/api/search", json={"image_id": query, "k": 5})
        sid = reply.json()["session_id"]
        for item, verdict in [(grouped[2][1], "approve"), (grouped[4][0], "decline")]:
            env.client.post(
                "/api/feedback", json={"session_id": sid, "item_id": item, "verdict": verdict}
            )
        queued = env.client.post("/api/refine", json={"session_id": sid}).json()
        job = wait_for_job(env.client, queued["job_id"])
        assert job["status"] == "done"
        before = env.client.post(
            "/api/search", json={"image_id": query, "k": 10, "session_id": sid}
        ).json()

        # a fresh process over the same state directory sees the same world
        featurizer = load_checkpoint(toy.featurizer(0))
        revived = TestClient(create_app(toy.manifest, featurizer, env.state_dir, alpha=ALPHA))
        session = revived.get(f"/api/sessions/{sid}").json()
        assert session["generation"] == 1
        assert session["feedback"] == {grouped[2][1]: "approve", grouped[4][0]: "decline"}
        assert session["snapshot_id"] == job["snapshot_id"]
        after = revived.post(
            "/api/search", json={"image_id": query, "k": 10, "session_id": sid}
        ).json()
        assert after["generation"] == 1
        assert [r["id"] for r in after["results"]] == [r["id"] for r in before["results"]]
        for a, b in zip(after["results"], before["results"]):
            assert a["score"] == pytest.approx(b["score"], abs=1e-9)

    def test_interrupted_job_is_failed_on_replay(self, toy, tmp_path):
        state_dir = tmp_path / "state"
        state_dir.mkdir()
        item = toy.manifest.entries[0].id
        events = [
            {"ts": 1.0, "type": "session_created", "session_id": "s1"},
            {"ts": 2.0, "type": "feedback", "session_id": "s1", "item_id": item,
             "verdict": "approve"},
            {"ts": 3.0, "type": "job_queued", "job_id": "j1", "session_id": "s1"},
            {"ts": 4.0, "type": "job_running", "job_id": "j1"},
        ]
        with (state_dir / "events.jsonl").open("w") as fh:
            for event in events:
                fh.write(json.dumps(event) + "\n")

        featurizer = load_checkpoint(toy.featurizer(0))
        state = ServiceState(toy.manifest, featurizer, state_dir)
        job = state.jobs["j1"]
        assert job.status == "failed"
        assert job.error == "interrupted by restart"
        assert state.sessions["s1"].active_job is None
        kinds = [json.loads(line)["type"]
                 for line in (state_dir / "events.jsonl").read_text().splitlines()]
        assert kinds[-1] == "job_failed"

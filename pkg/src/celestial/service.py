"""HTTP service: similarity search, relevance feedback, and refinement jobs.

The base featurizer and corpus index are immutable for the service lifetime.
Refinement trains a small session-local relevance head on frozen embeddings;
search then ranks by (1 - alpha) * cosine + alpha * relevance. Sessions,
feedback, and job transitions live in an append-only JSONL event log that is
replayed on startup; trained heads go to a content-addressed snapshot store.
"""

from __future__ import annotations

import hashlib
import io
import json
import mimetypes
import os
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from PIL import Image

from .checkpoint import checkpoint_digest, save_checkpoint
from .dataset import MANIFEST_HEADER, DatasetManifest, decode_sample
from .errors import DecodeError, NotFoundError, ValidationError
from .index import build_index, embed_manifest
from .model import DenseHead, FeaturizerModel, embed, state_bytes

VERDICTS = ("approve", "decline")
RELEVANCE_HIDDEN_DIM = 32
_REFINE_EPOCHS = 200
_REFINE_LR = 1e-2
_THUMBNAIL_MAX = 512


@dataclass
class JobRecord:
    id: str
    session_id: str
    status: str = "queued"
    snapshot_id: str | None = None
    error: str | None = None
    transitions: list[tuple[str, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "session_id": self.session_id,
            "status": self.status,
            "snapshot_id": self.snapshot_id,
            "error": self.error,
            "transitions": [[s, t] for s, t in self.transitions],
        }


@dataclass
class SessionRecord:
    id: str
    queries: list[str] = field(default_factory=list)
    feedback: dict[str, str] = field(default_factory=dict)
    generation: int = 0
    snapshot_id: str | None = None
    active_job: str | None = None
    head: DenseHead | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "queries": list(self.queries),
            "feedback": dict(self.feedback),
            "generation": self.generation,
            "snapshot_id": self.snapshot_id,
            "active_job": self.active_job,
        }


def _head_to_bytes(head: DenseHead) -> bytes:
    """Canonical serialization of a relevance head (for content addressing)."""
    state = head.state_dict()
    meta = {name: list(tensor.shape) for name, tensor in sorted(state.items())}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = b"".join(
        state[name].detach().numpy().astype("<f4").tobytes() for name in sorted(state)
    )
    return struct.pack("<I", len(header)) + header + blob


def _head_from_bytes(data: bytes, embedding_dim: int) -> DenseHead:
    (header_len,) = struct.unpack("<I", data[:4])
    meta = json.loads(data[4 : 4 + header_len].decode("utf-8"))
    head = DenseHead(embedding_dim, meta["hidden.bias"][0], meta["out.bias"][0])
    offset = 4 + header_len
    state = {}
    for name in sorted(meta):
        shape = meta[name]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        offset += 4 * count
    head.load_state_dict(state)
    head.eval()
    return head


def _train_relevance_head(
    embeddings: np.ndarray, relevant: np.ndarray, embedding_dim: int, seed: int
) -> DenseHead:
    """Binary relevant/irrelevant head fitted on frozen embeddings."""
    torch.manual_seed(seed)
    head = DenseHead(embedding_dim, RELEVANCE_HIDDEN_DIM, 2)
    optimizer = torch.optim.Adam(head.parameters(), lr=_REFINE_LR)
    x = torch.from_numpy(embeddings.astype(np.float32))
    y = torch.from_numpy(relevant.astype(np.int64))
    criterion = torch.nn.CrossEntropyLoss()
    head.train()
    for _ in range(_REFINE_EPOCHS):
        optimizer.zero_grad()
        loss = criterion(head(x), y)
        loss.backward()
        optimizer.step()
    head.eval()
    return head


class ServiceState:
    """All mutable service state plus the immutable base snapshot."""

    def __init__(
        self,
        manifest: DatasetManifest,
        featurizer: FeaturizerModel,
        state_dir: Path,
        alpha: float = 0.5,
    ):
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")
        if featurizer.has_projection:
            raise ValidationError("serve with a stripped featurizer")
        self.manifest = manifest
        self.featurizer = featurizer
        self.alpha = alpha
        self.state_dir = Path(state_dir)
        self.snapshot_dir = self.state_dir / "snapshots"
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.state_dir / "events.jsonl"
        self.lock = threading.RLock()
        self.sessions: dict[str, SessionRecord] = {}
        self.jobs: dict[str, JobRecord] = {}

        # immutable base snapshot: featurizer bytes, corpus embeddings, index
        self.base_bytes = state_bytes(featurizer)
        base_ckpt = save_checkpoint(featurizer, self.state_dir / "base_featurizer.ckpt")
        self.digest = checkpoint_digest(base_ckpt)
        self.ids, self.embeddings, labels = embed_manifest(featurizer, manifest)
        if not self.ids:
            raise ValidationError("corpus manifest is empty")
        self.index = build_index(self.ids, self.embeddings, labels=labels)
        self.row_of = {sid: i for i, sid in enumerate(self.ids)}
        self.started_at = time.time()
        self._replay()

    # --- event log -------------------------------------------------------------

    def append_event(self, kind: str, **fields) -> None:
        event = {"ts": time.time(), "type": kind, **fields}
        with self.lock:
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        with self.log_path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self._apply(json.loads(line))
        # a job that never reached a terminal state died with the old process
        for job in self.jobs.values():
            if job.status in ("queued", "running"):
                self.append_event("job_failed", job_id=job.id, error="interrupted by restart")
                job.status = "failed"
                job.error = "interrupted by restart"
                job.transitions.append(("failed", time.time()))
                session = self.sessions.get(job.session_id)
                if session and session.active_job == job.id:
                    session.active_job = None

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "session_created":
            self.sessions[event["session_id"]] = SessionRecord(id=event["session_id"])
        elif kind == "search":
            self.sessions[event["session_id"]].queries.append(event["query"])
        elif kind == "feedback":
            self.sessions[event["session_id"]].feedback[event["item_id"]] = event["verdict"]
        elif kind == "job_queued":
            job = JobRecord(id=event["job_id"], session_id=event["session_id"])
            job.transitions.append(("queued", event["ts"]))
            self.jobs[job.id] = job
            self.sessions[job.session_id].active_job = job.id
        elif kind == "job_running":
            job = self.jobs[event["job_id"]]
            job.status = "running"
            job.transitions.append(("running", event["ts"]))
        elif kind == "job_done":
            job = self.jobs[event["job_id"]]
            job.status = "done"
            job.snapshot_id = event["snapshot_id"]
            job.transitions.append(("done", event["ts"]))
            session = self.sessions[job.session_id]
            session.generation += 1
            session.snapshot_id = event["snapshot_id"]
            session.active_job = None
            session.head = self._load_snapshot(event["snapshot_id"])
        elif kind == "job_failed":
            job = self.jobs[event["job_id"]]
            job.status = "failed"
            job.error = event.get("error")
            job.transitions.append(("failed", event["ts"]))
            session = self.sessions.get(job.session_id)
            if session and session.active_job == job.id:
                session.active_job = None

    # --- snapshots ---------------------------------------------------------------

    def store_snapshot(self, head: DenseHead) -> str:
        data = _head_to_bytes(head)
        snapshot_id = hashlib.sha256(data).hexdigest()
        path = self.snapshot_dir / f"{snapshot_id}.bin"
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return snapshot_id

    def _load_snapshot(self, snapshot_id: str) -> DenseHead:
        data = (self.snapshot_dir / f"{snapshot_id}.bin").read_bytes()
        return _head_from_bytes(data, self.featurizer.config.embedding_dim)

    # --- sessions ----------------------------------------------------------------

    def create_session(self) -> SessionRecord:
        with self.lock:
            session = SessionRecord(id=uuid.uuid4().hex[:12])
            self.sessions[session.id] = session
            self.append_event("session_created", session_id=session.id)
            return session

    def get_session(self, session_id: str) -> SessionRecord:
        session = self.sessions.get(session_id)
        if session is None:
            raise NotFoundError(f"unknown session {session_id!r}")
        return session

    # --- search ------------------------------------------------------------------

    def rank(
        self, session: SessionRecord, query_vector: np.ndarray, k: int, exclude_id: str | None
    ) -> list[dict]:
        """Blend cosine similarity with the session head's relevance, if any."""
        q = np.asarray(query_vector, dtype=np.float64).ravel()
        qnorm = np.linalg.norm(q)
        if qnorm == 0.0:
            raise ValidationError("query embedding is the zero vector")
        sims = self.index.vectors @ (q / qnorm)

        with self.lock:
            head = session.head
        if head is None:
            scores = sims
            relevance = None
        else:
            with torch.no_grad():
                logits = head(torch.from_numpy(self.embeddings.astype(np.float32)))
                relevance = torch.softmax(logits, dim=1)[:, 1].numpy().astype(np.float64)
            scores = (1.0 - self.alpha) * sims + self.alpha * relevance

        order = sorted(
            (i for i in range(len(self.ids)) if self.ids[i] != exclude_id),
            key=lambda i: (-scores[i], self.ids[i]),
        )
        results = []
        for i in order[: max(k, 0)]:
            row = {
                "id": self.ids[i],
                "similarity": float(sims[i]),
                "score": float(scores[i]),
                "relevance": None if relevance is None else float(relevance[i]),
                "thumbnail": f"/api/images/{self.ids[i]}?size=128",
            }
            results.append(row)
        return results

    def embed_upload(self, data: bytes) -> np.ndarray:
        try:
            img = Image.open(io.BytesIO(data))
            img.load()
        except OSError:
            raise DecodeError("upload is not a decodable image") from None
        if img.mode != "RGB":
            img = img.convert("RGB")
        h, w = self.manifest.image_size
        img = img.resize((w, h), Image.Resampling.BILINEAR)
        pixels = (np.asarray(img, dtype=np.float32) / 255.0)[None, ...]
        return embed(self.featurizer, pixels)[0]

    # --- refinement ----------------------------------------------------------------

    def start_refinement(self, session: SessionRecord) -> JobRecord:
        with self.lock:
            verdicts = set(session.feedback.values())
            if "approve" not in verdicts or "decline" not in verdicts:
                raise ValidationError("refinement needs at least 1 approve and 1 decline")
            if session.active_job is not None:
                raise ValidationError(f"refinement {session.active_job} already in flight")
            job = JobRecord(id=uuid.uuid4().hex[:12], session_id=session.id)
            job.transitions.append(("queued", time.time()))
            self.jobs[job.id] = job
            session.active_job = job.id
            self.append_event("job_queued", job_id=job.id, session_id=session.id)
            feedback = dict(session.feedback)
            generation = session.generation
        worker = threading.Thread(
            target=self._run_refinement, args=(job, session, feedback, generation), daemon=True
        )
        worker.start()
        return job

    def _run_refinement(
        self, job: JobRecord, session: SessionRecord, feedback: dict[str, str], generation: int
    ) -> None:
        try:
            with self.lock:
                job.status = "running"
                job.transitions.append(("running", time.time()))
            self.append_event("job_running", job_id=job.id)

            item_ids = sorted(feedback)
            rows = np.array([self.row_of[i] for i in item_ids])
            x = self.embeddings[rows]
            y = np.array([1 if feedback[i] == "approve" else 0 for i in item_ids])
            head = _train_relevance_head(
                x, y, self.featurizer.config.embedding_dim, seed=generation
            )
            if state_bytes(self.featurizer) != self.base_bytes:
                raise ValidationError("base featurizer changed during refinement")
            snapshot_id = self.store_snapshot(head)

            # atomic swap: searches see either the old head or the new one
            self.append_event("job_done", job_id=job.id, snapshot_id=snapshot_id)
            with self.lock:
                job.status = "done"
                job.snapshot_id = snapshot_id
                job.transitions.append(("done", time.time()))
                session.head = head
                session.snapshot_id = snapshot_id
                session.generation = generation + 1
                session.active_job = None
        except Exception as exc:
            self.append_event("job_failed", job_id=job.id, error=str(exc))
            with self.lock:
                job.status = "failed"
                job.error = str(exc)
                job.transitions.append(("failed", time.time()))
                session.active_job = None


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except json.JSONDecodeError:
        raise HTTPException(status_code=400, detail="body must be JSON") from None
    if not isinstance(body, dict):
        raise HTTPException(status_code=400, detail="body must be a JSON object")
    return body


def _image_response(state: ServiceState, sample_id: str, size: int | None) -> Response:
    try:
        entry = state.manifest.entry(sample_id)
    except NotFoundError:
        raise HTTPException(status_code=404, detail=f"unknown image {sample_id!r}")
    if size is None:
        if state.manifest.root is not None:
            file_path = Path(state.manifest.root) / entry.path
            media_type = mimetypes.guess_type(str(file_path))[0] or "application/octet-stream"
            return Response(content=file_path.read_bytes(), media_type=media_type)
        # in-memory corpus: encode the stored pixels
        buf = io.BytesIO()
        Image.fromarray(state.manifest.images[sample_id]).save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")
    if not 1 <= size <= _THUMBNAIL_MAX:
        raise HTTPException(status_code=400, detail=f"size must be in [1, {_THUMBNAIL_MAX}]")
    sample = decode_sample(state.manifest, sample_id, target_size=(size, size))
    img = Image.fromarray((sample.pixels * 255.0 + 0.5).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png")


def create_app(
    manifest: DatasetManifest,
    featurizer: FeaturizerModel,
    state_dir: str | Path,
    alpha: float = 0.5,
) -> FastAPI:
    state = ServiceState(manifest, featurizer, Path(state_dir), alpha=alpha)
    app = FastAPI(title="celestial", version="0.1.0")
    app.state.service = state
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.post("/api/search")
    async def search(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("file")
            if upload is None:
                raise HTTPException(status_code=400, detail="multipart search needs a 'file' part")
            data = await upload.read()
            try:
                query_vector = state.embed_upload(data)
            except DecodeError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            session_id = form.get("session_id") or None
            raw_k = form.get("k", "10")
            exclude_self = str(form.get("exclude_self", "")).lower() in ("1", "true")
            query_label = "upload:" + hashlib.sha256(data).hexdigest()[:12]
            image_id = None
        else:
            body = await _json_body(request)
            image_id = body.get("image_id")
            if not image_id:
                raise HTTPException(status_code=400, detail="search needs image_id or a file upload")
            if image_id not in state.row_of:
                raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
            query_vector = state.embeddings[state.row_of[image_id]]
            session_id = body.get("session_id") or None
            raw_k = body.get("k", 10)
            exclude_self = bool(body.get("exclude_self", False))
            query_label = image_id
        try:
            k = int(raw_k)
        except (TypeError, ValueError):
            raise HTTPException(status_code=400, detail=f"k must be an integer, got {raw_k!r}")
        if k < 1:
            raise HTTPException(status_code=400, detail="k must be >= 1")

        if session_id is None:
            session = state.create_session()
        else:
            try:
                session = state.get_session(session_id)
            except NotFoundError as exc:
                raise HTTPException(status_code=404, detail=str(exc))
        with state.lock:
            session.queries.append(query_label)
        state.append_event("search", session_id=session.id, query=query_label)

        exclude = image_id if (exclude_self and image_id) else None
        results = state.rank(session, query_vector, k, exclude_id=exclude)
        return {
            "session_id": session.id,
            "generation": session.generation,
            "k": k,
            "results": results,
        }

    @app.post("/api/feedback")
    async def feedback(request: Request):
        body = await _json_body(request)
        verdict = body.get("verdict")
        if verdict not in VERDICTS:
            raise HTTPException(status_code=400, detail=f"verdict must be one of {VERDICTS}")
        try:
            session = state.get_session(body.get("session_id", ""))
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        item_id = body.get("item_id", "")
        if item_id not in state.row_of:
            raise HTTPException(status_code=404, detail=f"unknown item {item_id!r}")
        with state.lock:
            if session.feedback.get(item_id) != verdict:  # identical repeats are no-ops
                session.feedback[item_id] = verdict
                state.append_event(
                    "feedback", session_id=session.id, item_id=item_id, verdict=verdict
                )
        return Response(status_code=204)

    @app.post("/api/refine")
    async def refine(request: Request):
        body = await _json_body(request)
        try:
            session = state.get_session(body.get("session_id", ""))
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        try:
            job = state.start_refinement(session)
        except ValidationError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return JSONResponse(status_code=202, content={"job_id": job.id, "status": job.status})

    @app.get("/api/jobs/{job_id}")
    async def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id!r}")
        with state.lock:
            return job.to_json()

    @app.get("/api/sessions/{session_id}")
    async def get_session(session_id: str):
        try:
            session = state.get_session(session_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        with state.lock:
            return session.to_json()

    @app.get("/api/sessions/{session_id}/export")
    async def export_approved(session_id: str):
        try:
            session = state.get_session(session_id)
        except NotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        with state.lock:
            approved = sorted(i for i, v in session.feedback.items() if v == "approve")
        lines = [MANIFEST_HEADER, ",".join(state.manifest.class_names)]
        for item_id in approved:
            entry = state.manifest.entry(item_id)
            label = "-" if entry.label is None else str(entry.label)
            lines.append(f"{entry.id}\t{entry.path}\t{label}\t{entry.split}")
        return PlainTextResponse(
            "\n".join(lines) + "\n",
            headers={"Content-Disposition": f'attachment; filename="{session.id}_approved.tsv"'},
        )

    @app.get("/api/images/{sample_id}")
    async def get_image(sample_id: str, size: int | None = None):
        return _image_response(state, sample_id, size)

    @app.get("/api/status")
    async def status():
        with state.lock:
            return {
                "checkpoint_digest": state.digest,
                "index_size": state.index.size,
                "embedding_dim": state.featurizer.config.embedding_dim,
                "num_classes": state.manifest.num_classes,
                "image_size": list(state.manifest.image_size),
                "alpha": state.alpha,
                "sessions": len(state.sessions),
                "uptime_seconds": time.time() - state.started_at,
            }

    return app

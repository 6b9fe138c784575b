"""HTTP service for human-in-the-loop labelling triage.

A session aggregates image predictions to module level and serves a
review queue ordered by anomaly score. The decision threshold can be
adjusted live; scores are computed once at session creation and never
change afterwards. Every state transition (threshold change, decision)
is appended to an on-disk event log and fsynced before the request is
acknowledged, so sessions survive a service restart.
"""

from __future__ import annotations

import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel

from .errors import ThermoscanError
from .evaluation import DEFAULT_SECONDS_PER_MODULE, savings_report
from .manifest import read_manifest, read_png16
from .preprocess import normalize_minmax
from .store import read_store

DECISION_VALUES = ("confirmed_anomalous", "confirmed_normal", "skipped")
DEFAULT_PAGE_LIMIT = 50
MAX_PAGE_LIMIT = 500


@dataclass
class ModuleEntry:
    module_id: int
    score: float
    representative_image_id: int
    n_images: int
    truth_anomalous: bool | None = None


@dataclass
class TriageSession:
    session_id: str
    directory: Path
    delta: float
    k: int
    source_store: str
    predictions_path: str
    has_labels: bool
    created_at: str
    modules: list[ModuleEntry]
    decisions: dict[int, str] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def module_map(self) -> dict[int, ModuleEntry]:
        return {m.module_id: m for m in self.modules}

    def flagged(self, delta: float | None = None) -> list[ModuleEntry]:
        d = self.delta if delta is None else delta
        return [m for m in self.modules if m.score > d]

    def projection(self, delta: float | None = None) -> dict:
        d = self.delta if delta is None else delta
        flagged = self.flagged(d)
        out: dict = {
            "delta": d,
            "modules_to_review": len(flagged),
            "estimated_review_time_s": len(flagged) * DEFAULT_SECONDS_PER_MODULE,
        }
        if self.has_labels:
            total = len(self.modules)
            anomalous = sum(1 for m in self.modules if m.truth_anomalous)
            tp = sum(1 for m in flagged if m.truth_anomalous)
            fp = len(flagged) - tp
            normals = total - anomalous
            tnr = (normals - fp) / normals if normals else 0.0
            recall = tp / anomalous if anomalous else 0.0
            report = savings_report(total, anomalous, tnr, recall)
            out["estimated_lost_anomalies"] = report.lost_anomalies
            out["savings"] = report.to_dict()
        return out


def _aggregate_predictions(records: list[dict]) -> list[ModuleEntry]:
    by_module: dict[int, list[dict]] = {}
    for rec in records:
        by_module.setdefault(int(rec["module_id"]), []).append(rec)
    entries = []
    for module_id, group in by_module.items():
        best = min(group, key=lambda r: (-float(r["score"]), int(r["image_id"])))
        entries.append(
            ModuleEntry(
                module_id=module_id,
                score=float(np.mean([float(r["score"]) for r in group])),
                representative_image_id=int(best["image_id"]),
                n_images=len(group),
            )
        )
    entries.sort(key=lambda m: (-m.score, m.module_id))
    return entries


def _load_predictions(path: Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["image_id"], rec["module_id"], rec["score"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise ThermoscanError(f"{path}:{lineno}: bad prediction record: {exc}")
            records.append(rec)
    if not records:
        raise ThermoscanError(f"{path}: no prediction records")
    return records


class _SessionStore:
    """On-disk session persistence: meta.json plus an append-only event log."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)

    def session_dir(self, session_id: str) -> Path:
        return self.root / session_id

    def persist_new(self, session: TriageSession) -> None:
        directory = session.directory
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "session_id": session.session_id,
            "delta": session.delta,
            "k": session.k,
            "source_store": session.source_store,
            "predictions": session.predictions_path,
            "has_labels": session.has_labels,
            "created_at": session.created_at,
            "modules": [
                {
                    "module_id": m.module_id,
                    "score": m.score,
                    "representative_image_id": m.representative_image_id,
                    "n_images": m.n_images,
                    "truth_anomalous": m.truth_anomalous,
                }
                for m in session.modules
            ],
        }
        tmp = directory / "meta.json.tmp"
        tmp.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        os.replace(tmp, directory / "meta.json")
        (directory / "events.log").touch()

    def append_event(self, session: TriageSession, event: dict) -> None:
        with open(session.directory / "events.log", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def load_all(self) -> dict[str, TriageSession]:
        sessions = {}
        for meta_path in sorted(self.root.glob("*/meta.json")):
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            session = TriageSession(
                session_id=meta["session_id"],
                directory=meta_path.parent,
                delta=float(meta["delta"]),
                k=int(meta["k"]),
                source_store=meta["source_store"],
                predictions_path=meta["predictions"],
                has_labels=bool(meta["has_labels"]),
                created_at=meta["created_at"],
                modules=[
                    ModuleEntry(
                        module_id=int(m["module_id"]),
                        score=float(m["score"]),
                        representative_image_id=int(m["representative_image_id"]),
                        n_images=int(m["n_images"]),
                        truth_anomalous=m["truth_anomalous"],
                    )
                    for m in meta["modules"]
                ],
            )
            events_path = session.directory / "events.log"
            if events_path.exists():
                with open(events_path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        if not line.strip():
                            continue
                        event = json.loads(line)
                        if event["type"] == "threshold":
                            session.delta = float(event["delta"])
                        elif event["type"] == "decision":
                            session.decisions[int(event["module_id"])] = event["verdict"]
            sessions[session.session_id] = session
        return sessions


class _ImageCatalog:
    """image_id -> PNG path, built from every manifest under the data root."""

    def __init__(self, root: Path):
        self.root = root
        self.paths: dict[int, Path] = {}
        self.refresh()

    def refresh(self) -> None:
        for manifest_path in self.root.rglob("manifest.jsonl"):
            try:
                for entry in read_manifest(manifest_path):
                    self.paths[entry.image_id] = manifest_path.parent / entry.path
            except ThermoscanError:
                continue

    def lookup(self, image_id: int) -> Path | None:
        if image_id not in self.paths:
            self.refresh()
        return self.paths.get(image_id)


class CreateSessionRequest(BaseModel):
    source_store: str
    predictions: str
    delta: float = 0.1
    k: int = 100
    labels: str | None = None


class ThresholdRequest(BaseModel):
    delta: float


class DecisionRequest(BaseModel):
    module_id: int
    verdict: str


def create_app(data_root: Path | str) -> FastAPI:
    data_root = Path(data_root)
    app = FastAPI(title="thermoscan triage service")
    # The review frontend may be served from a different origin during
    # development; the API carries no credentials.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    store = _SessionStore(data_root / "sessions")
    catalog = _ImageCatalog(data_root)
    sessions: dict[str, TriageSession] = store.load_all()
    registry_lock = threading.Lock()

    def get_session(session_id: str) -> TriageSession:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def resolve(path_str: str) -> Path:
        path = Path(path_str)
        return path if path.is_absolute() else data_root / path

    @app.post("/v1/sessions")
    def create_session(body: CreateSessionRequest):
        if not 0.0 <= body.delta <= 1.0:
            raise HTTPException(status_code=400, detail="delta must lie in [0, 1]")
        try:
            predictions = _load_predictions(resolve(body.predictions))
            source = read_store(resolve(body.source_store))
            labels_by_image = {}
            if body.labels:
                labelled = read_store(resolve(body.labels))
                labels_by_image = {
                    e.image_id: e.is_anomalous
                    for e in labelled
                    if e.binary_label is not None
                }
        except (ThermoscanError, OSError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        if not source:
            raise HTTPException(status_code=400, detail="empty source store")

        modules = _aggregate_predictions(predictions)
        has_labels = bool(labels_by_image)
        if has_labels:
            truth: dict[int, bool] = {}
            for rec in predictions:
                image_id = int(rec["image_id"])
                if image_id in labels_by_image:
                    mid = int(rec["module_id"])
                    truth[mid] = truth.get(mid, False) or labels_by_image[image_id]
            for m in modules:
                m.truth_anomalous = truth.get(m.module_id, False)

        session_id = uuid.uuid4().hex
        session = TriageSession(
            session_id=session_id,
            directory=store.session_dir(session_id),
            delta=body.delta,
            k=body.k,
            source_store=str(body.source_store),
            predictions_path=str(body.predictions),
            has_labels=has_labels,
            created_at=datetime.now(timezone.utc).isoformat(),
            modules=modules,
        )
        store.persist_new(session)
        with registry_lock:
            sessions[session_id] = session
        return {"session_id": session_id}

    @app.put("/v1/sessions/{session_id}/threshold")
    def set_threshold(session_id: str, body: ThresholdRequest):
        session = get_session(session_id)
        if not 0.0 <= body.delta <= 1.0:
            raise HTTPException(status_code=400, detail="delta must lie in [0, 1]")
        with session.lock:
            store.append_event(session, {"type": "threshold", "delta": body.delta})
            session.delta = body.delta
            return session.projection()

    @app.get("/v1/sessions/{session_id}/queue")
    def queue_page(session_id: str, cursor: int = 0, limit: int = DEFAULT_PAGE_LIMIT):
        session = get_session(session_id)
        if cursor < 0 or limit < 0:
            raise HTTPException(status_code=400, detail="cursor and limit must be >= 0")
        limit = min(limit, MAX_PAGE_LIMIT)
        with session.lock:
            ordered = sorted(
                session.modules,
                key=lambda m: (m.module_id in session.decisions, -m.score, m.module_id),
            )
            page = ordered[cursor:cursor + limit]
            items = [
                {
                    "module_id": m.module_id,
                    "score": m.score,
                    "representative_image_id": m.representative_image_id,
                    "n_images": m.n_images,
                    "verdict": "anomalous" if m.score > session.delta else "normal",
                    "decision": session.decisions.get(m.module_id),
                }
                for m in page
            ]
            next_cursor = cursor + len(page)
            return {
                "items": items,
                "next_cursor": next_cursor if next_cursor < len(ordered) else None,
                "total": len(ordered),
            }

    @app.post("/v1/sessions/{session_id}/decisions")
    def record_decision(session_id: str, body: DecisionRequest):
        session = get_session(session_id)
        if body.verdict not in DECISION_VALUES:
            raise HTTPException(
                status_code=400,
                detail=f"verdict must be one of {list(DECISION_VALUES)}",
            )
        with session.lock:
            if body.module_id not in session.module_map:
                raise HTTPException(
                    status_code=404, detail=f"unknown module {body.module_id}"
                )
            store.append_event(
                session,
                {"type": "decision", "module_id": body.module_id, "verdict": body.verdict},
            )
            session.decisions[body.module_id] = body.verdict
            return {"ok": True, "decided": len(session.decisions)}

    @app.get("/v1/sessions/{session_id}/report")
    def report(session_id: str):
        session = get_session(session_id)
        with session.lock:
            projection = session.projection()
            decided = len(session.decisions)
            return {
                "session_id": session.session_id,
                "delta": session.delta,
                "projection": projection,
                "review_time_s": projection["modules_to_review"]
                * DEFAULT_SECONDS_PER_MODULE,
                "baseline_time_s": len(session.modules) * DEFAULT_SECONDS_PER_MODULE,
                "progress": {
                    "decided": decided,
                    "total": len(session.modules),
                    "decisions": {str(k): v for k, v in session.decisions.items()},
                },
            }

    @app.get("/v1/images/{image_id}/preview")
    def image_preview(image_id: int):
        path = catalog.lookup(image_id)
        if path is None or not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown image {image_id}")
        raw = read_png16(path)
        preview = normalize_minmax(raw.astype(np.float64))
        buf = io.BytesIO()
        Image.fromarray(preview, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    return app

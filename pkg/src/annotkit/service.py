"""HTTP session service for human annotators and scripted clients.

Sessions live in memory; every action is written through to an
append-only log so a crashed server can rebuild its sessions by replay.
Actions within one session are serialized; the ledger returned over the
wire is always the engine's own (the service adds no cost logic).
"""
from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import Body, FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse

from . import metrics
from .dataset import DatasetManifest, load_manifest
from .engine import (
    ActionRecord,
    AnnotationSession,
    SessionConfig,
    new_session,
    render_hash,
)
from .errors import (
    AnnotkitError,
    InvalidActionError,
    NoCandidatesError,
    OutOfBoundsError,
    UnknownLabelError,
    UnknownSegmentError,
)
from .masks import Point


def int_map_rle(values: np.ndarray) -> list[list[int]]:
    """Row-major (value, run length) pairs for an integer map."""
    flat = values.ravel()
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    return [[int(flat[start]), int(end - start)] for start, end in zip(edges[:-1], edges[1:])]


@dataclass
class SessionRecord:
    session_id: str
    image_id: str
    session: AnnotationSession
    created_at: float
    last_action_at: float
    durations: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class ServiceState:
    def __init__(self, manifest: DatasetManifest, persist_dir: str | None, base_dir: str = "."):
        self.manifest = manifest
        self.persist_dir = persist_dir
        self.base_dir = base_dir
        self.sessions: dict[str, SessionRecord] = {}
        self._counter = 0
        self._gt_index_cache: dict[str, metrics.GroundTruthIndex] = {}
        self._create_lock = threading.Lock()
        if persist_dir:
            os.makedirs(persist_dir, exist_ok=True)
            self._recover()

    def next_id(self) -> str:
        with self._create_lock:
            self._counter += 1
            return f"s{self._counter:06d}"

    def gt_index(self, image_id: str) -> metrics.GroundTruthIndex | None:
        image = self.manifest.by_id[image_id]
        if image.gt is None:
            return None
        if image_id not in self._gt_index_cache:
            self._gt_index_cache[image_id] = metrics.GroundTruthIndex(image.gt)
        return self._gt_index_cache[image_id]

    # -- persistence ----------------------------------------------------

    def header_path(self, session_id: str) -> str:
        return os.path.join(self.persist_dir, f"{session_id}.header.json")

    def log_path(self, session_id: str) -> str:
        return os.path.join(self.persist_dir, f"{session_id}.log")

    def persist_header(self, record: SessionRecord):
        if not self.persist_dir:
            return
        with open(self.header_path(record.session_id), "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "session_id": record.session_id,
                    "image_id": record.image_id,
                    "config": record.session.config.to_json(),
                },
                fh,
            )

    def persist_action(self, record: SessionRecord, action: ActionRecord):
        if not self.persist_dir:
            return
        with open(self.log_path(record.session_id), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(action.to_json()) + "\n")

    def _recover(self):
        for name in sorted(os.listdir(self.persist_dir)):
            if not name.endswith(".header.json"):
                continue
            with open(os.path.join(self.persist_dir, name), "r", encoding="utf-8") as fh:
                header = json.load(fh)
            session_id = header["session_id"]
            image = self.manifest.by_id.get(header["image_id"])
            if image is None or image.proposals is None:
                continue
            session = new_session(
                image.proposals, SessionConfig.from_json(header["config"]), self.manifest.catalog
            )
            log_path = self.log_path(session_id)
            if os.path.exists(log_path):
                with open(log_path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        if not line.strip():
                            continue
                        action = ActionRecord.from_json(json.loads(line))
                        _apply_logged(session, action)
            now = time.time()
            self.sessions[session_id] = SessionRecord(
                session_id=session_id,
                image_id=header["image_id"],
                session=session,
                created_at=now,
                last_action_at=now,
            )
            self._counter = max(self._counter, int(session_id.lstrip("s")))


def _apply_logged(session: AnnotationSession, action: ActionRecord):
    label_by_id = {label.id: label for label in session.catalog}
    if action.kind == "add":
        try:
            session.apply_add(Point(*action.point), action.chosen_index if not action.failed else 0)
        except NoCandidatesError:
            if not action.failed:
                raise
    elif action.kind == "remove":
        session.apply_remove(action.segment_id)
    elif action.kind == "change_label":
        session.apply_change_label(action.segment_id, label_by_id[action.label_id], action.via_shortlist)
    elif action.kind == "change_depth":
        session.apply_change_depth(action.segment_id, action.shift)
    else:
        raise InvalidActionError(f"unknown logged action kind {action.kind!r}")


def create_app(dataset, persist_dir: str | None = None) -> FastAPI:
    """Build the service over a manifest (object or path)."""
    if isinstance(dataset, (str, os.PathLike)):
        base_dir = os.path.dirname(os.path.abspath(dataset))
        manifest = load_manifest(dataset)
    else:
        base_dir = "."
        manifest = dataset
    state = ServiceState(manifest, persist_dir, base_dir)
    app = FastAPI(title="annotkit session service")
    app.state.annot = state

    def get_record(session_id: str) -> SessionRecord:
        record = state.sessions.get(session_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return record

    def summary(record: SessionRecord) -> dict:
        session = record.session
        image = state.manifest.by_id[record.image_id]
        out = {
            "session_id": record.session_id,
            "image_id": record.image_id,
            "canvas": {"width": image.canvas.width, "height": image.canvas.height},
            "config": session.config.to_json(),
            "active": [{"segment_id": e.segment_id, "label": e.label.id} for e in session.active],
            "ledger": session.ledger().to_json(),
        }
        gt_index = state.gt_index(record.image_id)
        if gt_index is not None:
            report = gt_index.score_rendering(session.render())
            out["quality"] = {"recall": report.recall, "pq": report.panoptic_quality}
        return out

    @app.get("/catalog")
    def catalog():
        return {"catalog": [{"id": label.id, "kind": label.kind} for label in state.manifest.catalog]}

    @app.get("/images/{image_id}")
    def image_display(image_id: str):
        image = state.manifest.by_id.get(image_id)
        if image is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        if image.display is None:
            raise HTTPException(status_code=404, detail=f"image {image_id!r} has no display file")
        path = os.path.join(state.base_dir, image.display)
        if not os.path.exists(path):
            raise HTTPException(status_code=404, detail=f"display file missing for {image_id!r}")
        return FileResponse(path, media_type="image/png")

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(...)):
        image_id = payload.get("image_id")
        image = state.manifest.by_id.get(image_id)
        if image is None:
            raise HTTPException(status_code=404, detail=f"unknown image {image_id!r}")
        if image.proposals is None:
            raise HTTPException(status_code=400, detail=f"image {image_id!r} has no proposals")
        try:
            config = SessionConfig.from_json(payload.get("config") or {})
            session = new_session(image.proposals, config, state.manifest.catalog)
        except (ValueError, UnknownLabelError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        now = time.time()
        record = SessionRecord(
            session_id=state.next_id(),
            image_id=image_id,
            session=session,
            created_at=now,
            last_action_at=now,
        )
        state.sessions[record.session_id] = record
        state.persist_header(record)
        return {"session_id": record.session_id, "state": summary(record)}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return {"state": summary(get_record(session_id))}

    @app.get("/sessions/{session_id}/candidates")
    def candidates(session_id: str, x: float, y: float):
        record = get_record(session_id)
        try:
            got = record.session.candidates_at(Point(x, y))
        except OutOfBoundsError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        payload = []
        for sid in got.segment_ids:
            seg = record.session.proposals.get(sid)
            payload.append(
                {
                    "segment_id": seg.id,
                    "label": seg.label.id,
                    "score": seg.score,
                    "rle": seg.mask.to_rle_text(),
                }
            )
        return {"anchor": [x, y], "candidates": payload}

    @app.post("/sessions/{session_id}/actions")
    def act(session_id: str, payload: dict = Body(...)):
        record = get_record(session_id)
        kind = payload.get("kind")
        params = payload.get("params") or {}
        label_by_id = {label.id: label for label in record.session.catalog}
        with record.lock:
            expected = payload.get("expected_total")
            if expected is not None and expected != record.session.ledger().total:
                raise HTTPException(status_code=409, detail="ledger total does not match expected_total")
            arrived = time.time()
            failed = False
            try:
                if kind == "add":
                    point = params.get("point")
                    if not isinstance(point, (list, tuple)) or len(point) != 2:
                        raise InvalidActionError("add needs params.point = [x, y]")
                    try:
                        cost = record.session.apply_add(
                            Point(float(point[0]), float(point[1])), int(params.get("chosen_index", 0))
                        )
                    except NoCandidatesError:
                        cost = 1
                        failed = True
                elif kind == "remove":
                    cost = record.session.apply_remove(params.get("segment_id"))
                elif kind == "change_label":
                    label = label_by_id.get(params.get("label"))
                    if label is None:
                        raise UnknownLabelError(f"label {params.get('label')!r} not in catalog")
                    cost = record.session.apply_change_label(
                        params.get("segment_id"), label, bool(params.get("via_shortlist", True))
                    )
                elif kind == "change_depth":
                    cost = record.session.apply_change_depth(
                        params.get("segment_id"), int(params.get("shift", 0))
                    )
                else:
                    raise InvalidActionError(f"unknown action kind {kind!r}")
            except (InvalidActionError, UnknownSegmentError, UnknownLabelError, OutOfBoundsError) as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            seconds = arrived - record.last_action_at
            record.last_action_at = arrived
            record.durations.append(seconds)
            state.persist_action(record, record.session.log[-1])
            return {
                "state": summary(record),
                "cost": cost,
                "failed": failed,
                "seconds_since_last_action": seconds,
            }

    @app.get("/sessions/{session_id}/render")
    def render(session_id: str):
        record = get_record(session_id)
        rendering = record.session.render()
        body = {
            "width": rendering.canvas.width,
            "height": rendering.canvas.height,
            "render_hash": render_hash(rendering),
            "unlabeled": -1,
            "entries": [
                {"segment_id": e.segment_id, "label": e.label.id} for e in rendering.entries
            ],
            "segment_code_rle": int_map_rle(rendering.segment_code_map),
        }
        return JSONResponse(content=body)

    @app.get("/sessions/{session_id}/metrics")
    def session_metrics(session_id: str):
        record = get_record(session_id)
        gt_index = state.gt_index(record.image_id)
        if gt_index is None:
            raise HTTPException(status_code=409, detail=f"image {record.image_id!r} has no ground truth")
        report = gt_index.score_rendering(record.session.render())
        return report.to_json()

    return app

"""HTTP service for the retrospective reader study.

Radiologists are served cases blind (no model output) or assisted (model
probabilities and overlay available) in a per-reader seeded order, their
responses land in an append-only JSON Lines log, and a token-guarded summary
compares per-class recognition rates of each reader against the model.

State on disk, under DATA_DIR:
    cases.jsonl      case index (never mutated by the service)
    readers.json     list of registered reader ids
    responses.jsonl  append-only response log (the single source of truth)
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Header, Request, Response
from fastapi.responses import FileResponse, JSONResponse

from .corpus import FIVE_CLASSES
from .metrics import argmax_label

VALID_LABELS = tuple(FIVE_CLASSES)
VALID_MODES = ("blind", "assisted")


@dataclass
class Case:
    """One study case; the true label never leaves the server unsummarized."""

    case_id: str
    sample_id: str
    image_path: str
    true_label: str
    model_probabilities: list[float]
    overlay_path: str | None = None

    @classmethod
    def from_json_dict(cls, data: dict) -> "Case":
        return cls(
            case_id=data["case_id"],
            sample_id=data["sample_id"],
            image_path=data["image_path"],
            true_label=data["true_label"],
            model_probabilities=list(data["model_probabilities"]),
            overlay_path=data.get("overlay_path"),
        )


@dataclass
class ReaderResponse:
    reader_id: str
    case_id: str
    chosen_label: str
    mode: str
    elapsed_ms: int
    submitted_at: str

    def to_json_dict(self) -> dict:
        return {
            "reader_id": self.reader_id,
            "case_id": self.case_id,
            "chosen_label": self.chosen_label,
            "mode": self.mode,
            "elapsed_ms": self.elapsed_ms,
            "submitted_at": self.submitted_at,
        }


class StudyStore:
    """Cases, readers and the append-only response log.

    Appends are serialized under one lock and duplicate detection happens
    inside it, so concurrent submissions cannot double-log. Reads work on
    snapshots and need no lock.
    """

    def __init__(
        self,
        data_dir: str | Path,
        study_seed: int = 0,
        cases_path: str | Path | None = None,
    ):
        self.data_dir = Path(data_dir)
        self.study_seed = study_seed
        self.cases: dict[str, Case] = {}
        self.case_order: list[str] = []
        for line in self._read_lines(Path(cases_path or self.data_dir / "cases.jsonl")):
            case = Case.from_json_dict(json.loads(line))
            if case.case_id in self.cases:
                raise ValueError(f"duplicate case_id {case.case_id}")
            self.cases[case.case_id] = case
            self.case_order.append(case.case_id)
        readers_file = self.data_dir / "readers.json"
        self.readers: list[str] = (
            json.loads(readers_file.read_text(encoding="utf-8"))
            if readers_file.exists()
            else []
        )
        self.log_path = self.data_dir / "responses.jsonl"
        self._lock = threading.Lock()
        self.responses: list[ReaderResponse] = []
        self._answered: set[tuple[str, str]] = set()
        for line in self._read_lines(self.log_path):
            r = ReaderResponse(**json.loads(line))
            self.responses.append(r)
            self._answered.add((r.reader_id, r.case_id))

    @staticmethod
    def _read_lines(path: Path):
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield line

    def reader_case_order(self, reader_id: str) -> list[str]:
        """Deterministic per-reader shuffle of the shared case set."""
        digest = hashlib.sha256(f"{self.study_seed}:{reader_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        order = list(self.case_order)
        rng.shuffle(order)
        return order

    def next_case(self, reader_id: str) -> Case | None:
        answered = {c for r, c in self._answered if r == reader_id}
        for case_id in self.reader_case_order(reader_id):
            if case_id not in answered:
                return self.cases[case_id]
        return None

    def remaining(self, reader_id: str) -> int:
        answered = {c for r, c in self._answered if r == reader_id}
        return len(self.case_order) - len(answered)

    def append_response(self, response: ReaderResponse) -> bool:
        """Atomically append unless (reader, case) already answered."""
        key = (response.reader_id, response.case_id)
        with self._lock:
            if key in self._answered:
                return False
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(response.to_json_dict()) + "\n")
                fh.flush()
            self.responses.append(response)
            self._answered.add(key)
            return True

    def summary(self) -> dict:
        """Per-class recognition rates for each reader and the model.

        Derived entirely from the case index and the response log, so
        replaying the log reproduces it exactly.
        """
        per_reader: dict[str, dict] = {}
        for reader_id in self.readers:
            counts = {c: 0 for c in VALID_LABELS}
            correct = {c: 0 for c in VALID_LABELS}
            for r in self.responses:
                if r.reader_id != reader_id:
                    continue
                case = self.cases.get(r.case_id)
                if case is None:
                    continue
                counts[case.true_label] += 1
                if r.chosen_label == case.true_label:
                    correct[case.true_label] += 1
            per_reader[reader_id] = {
                "recognition_rate": {
                    c: (correct[c] / counts[c] if counts[c] else None) for c in VALID_LABELS
                },
                "totals": counts,
                "responses": sum(counts.values()),
            }
        model_counts = {c: 0 for c in VALID_LABELS}
        model_correct = {c: 0 for c in VALID_LABELS}
        for case in self.cases.values():
            model_counts[case.true_label] += 1
            predicted = VALID_LABELS[argmax_label(case.model_probabilities)]
            if predicted == case.true_label:
                model_correct[case.true_label] += 1
        return {
            "labels": list(VALID_LABELS),
            "model": {
                "recognition_rate": {
                    c: (model_correct[c] / model_counts[c] if model_counts[c] else None)
                    for c in VALID_LABELS
                },
                "totals": model_counts,
            },
            "readers": per_reader,
            "case_count": len(self.cases),
            "response_count": len(self.responses),
        }


def create_app(
    data_dir: str | Path,
    admin_token: str = "",
    study_seed: int = 0,
    cases_path: str | Path | None = None,
    ui_dir: str | Path | None = None,
) -> FastAPI:
    store = StudyStore(data_dir, study_seed=study_seed, cases_path=cases_path)
    app = FastAPI(title="reader-study")
    app.state.store = store

    def error(status: int, message: str, **extra):
        return JSONResponse(status_code=status, content={"error": message, **extra})

    @app.get("/api/meta")
    def meta():
        return {
            "labels": list(VALID_LABELS),
            "case_count": len(store.cases),
            "readers": store.readers,
        }

    @app.get("/api/cases/next")
    def next_case(reader: str, mode: str = "blind"):
        if reader not in store.readers:
            return error(404, f"unknown reader {reader!r}")
        if mode not in VALID_MODES:
            return error(422, f"mode must be one of {VALID_MODES}")
        case = store.next_case(reader)
        if case is None:
            return Response(status_code=204)  # study complete
        body = {
            "case_id": case.case_id,
            "mode": mode,
            "image_url": f"/api/cases/{case.case_id}/image",
            "remaining": store.remaining(reader),
        }
        if mode == "assisted":
            body["model_probabilities"] = {
                label: float(p) for label, p in zip(VALID_LABELS, case.model_probabilities)
            }
            if case.overlay_path:
                body["overlay_url"] = f"/api/cases/{case.case_id}/overlay"
        return body

    @app.get("/api/cases/{case_id}/image")
    def case_image(case_id: str):
        case = store.cases.get(case_id)
        if case is None:
            return error(404, f"unknown case {case_id!r}")
        return FileResponse(store.data_dir / case.image_path, media_type="image/png")

    @app.get("/api/cases/{case_id}/overlay")
    def case_overlay(case_id: str):
        case = store.cases.get(case_id)
        if case is None:
            return error(404, f"unknown case {case_id!r}")
        if not case.overlay_path:
            return error(404, f"case {case_id!r} has no overlay")
        return FileResponse(store.data_dir / case.overlay_path, media_type="image/png")

    @app.post("/api/cases/{case_id}/responses", status_code=201)
    async def submit(case_id: str, request: Request):
        body = await request.json()
        reader_id = body.get("reader_id")
        if reader_id not in store.readers:
            return error(404, f"unknown reader {reader_id!r}")
        if case_id not in store.cases:
            return error(404, f"unknown case {case_id!r}")
        label = body.get("chosen_label")
        if label not in VALID_LABELS:
            return error(
                422, f"invalid label {label!r}", valid_labels=list(VALID_LABELS)
            )
        mode = body.get("mode", "blind")
        if mode not in VALID_MODES:
            return error(422, f"mode must be one of {VALID_MODES}")
        elapsed = body.get("elapsed_ms", 0)
        if not isinstance(elapsed, int) or elapsed < 0:
            return error(422, "elapsed_ms must be a non-negative integer")
        response = ReaderResponse(
            reader_id=reader_id,
            case_id=case_id,
            chosen_label=label,
            mode=mode,
            elapsed_ms=elapsed,
            submitted_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        )
        if not store.append_response(response):
            return error(409, f"reader {reader_id!r} already answered case {case_id!r}")
        return {"status": "created", "responses": len(store.responses)}

    @app.get("/api/summary")
    def summary(x_admin_token: str | None = Header(default=None)):
        if not admin_token or x_admin_token != admin_token:
            return error(403, "summary requires the admin token")
        return store.summary()

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(
    data_dir: str | Path,
    port: int,
    admin_token: str = "",
    study_seed: int = 0,
    host: str = "127.0.0.1",
    cases_path: str | Path | None = None,
    ui_dir: str | Path | None = None,
) -> None:
    import uvicorn

    app = create_app(
        data_dir,
        admin_token=admin_token,
        study_seed=study_seed,
        cases_path=cases_path,
        ui_dir=ui_dir,
    )
    uvicorn.run(app, host=host, port=port, log_level="warning")

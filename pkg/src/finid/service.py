"""Human-in-the-loop review service.

Pending query images are matched against the catalogue; a human confirms a
candidate identity, declares a new individual, or skips. Decisions are
appended to a durable JSONL log before they are acknowledged, and replaying
the log over the base store reconstructs the catalogue state exactly.

The HTTP layer is a thin JSON adapter over :class:`ReviewService`; GETs are
served concurrently against the in-memory state while decisions are
serialised through one writer lock.
"""

from __future__ import annotations

import datetime
import json
import os
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .catalogue import CatalogueStore, match
from .errors import ServiceError
from .imageops import png_bytes


class TaskNotFound(ServiceError):
    http_status = 404


class AlreadyDecided(ServiceError):
    http_status = 409


class InvalidDecision(ServiceError):
    http_status = 422


ACTIONS = ("confirm", "new_individual", "skip")


@dataclass
class Candidate:
    rank: int
    identity_id: str
    distance: float
    exemplar_image_ids: list[str]

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "identity_id": self.identity_id,
            "distance": self.distance,
            "exemplar_image_ids": self.exemplar_image_ids,
            "exemplar_urls": [f"/images/{i}" for i in self.exemplar_image_ids],
        }


@dataclass
class ReviewTask:
    task_id: str
    query_image_id: str
    candidates: list[Candidate]
    status: str = "pending"
    decided_identity: str | None = None
    decided_at: str | None = None
    decided_by: str | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "query_image_id": self.query_image_id,
            "query_image_url": f"/images/{self.query_image_id}",
            "status": self.status,
            "candidates": [c.to_json() for c in self.candidates],
            "decided_identity": self.decided_identity,
            "decided_at": self.decided_at,
            "decided_by": self.decided_by,
        }


@dataclass
class PendingQuery:
    image_id: str
    embedding: np.ndarray
    date: str = "1970-01-01"


class ReviewService:
    """Task queue + decision log + catalogue mutations.

    order="confident" serves tasks by ascending rank-1 distance;
    order="uncertain" reverses (active-learning style).
    """

    def __init__(
        self,
        store: CatalogueStore,
        pending: list[PendingQuery],
        log_path: str,
        k_candidates: int = 5,
        order: str = "confident",
        images: dict[str, np.ndarray] | None = None,
        exemplars_per_candidate: int = 3,
    ):
        if order not in ("confident", "uncertain"):
            raise ServiceError(f"service: unknown task order {order!r}")
        self.store = store
        self.log_path = log_path
        self.images = images or {}
        self._lock = threading.Lock()
        self._new_counter = 0

        tasks = []
        for query in pending:
            result = match(store, query.embedding, k_ids=k_candidates)
            candidates = [
                Candidate(
                    rank=r + 1,
                    identity_id=item.identity_id,
                    distance=item.distance,
                    exemplar_image_ids=item.image_ids[:exemplars_per_candidate],
                )
                for r, item in enumerate(result.items)
            ]
            tasks.append(
                (
                    candidates[0].distance if candidates else float("inf"),
                    ReviewTask(
                        task_id=f"task-{query.image_id}",
                        query_image_id=query.image_id,
                        candidates=candidates,
                    ),
                    query,
                )
            )
        tasks.sort(key=lambda t: (t[0], t[1].task_id), reverse=(order == "uncertain"))
        self.tasks: dict[str, ReviewTask] = {t.task_id: t for _, t, _ in tasks}
        self._order: list[str] = [t.task_id for _, t, _ in tasks]
        self._queries: dict[str, PendingQuery] = {t.task_id: q for _, t, q in tasks}

        if os.path.exists(log_path):
            self._replay()

    # -- log ---------------------------------------------------------------

    def _replay(self) -> None:
        with open(self.log_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError:
                    raise ServiceError(f"service: decision log line {lineno} is corrupt") from None
                self._apply(entry, replay=True)

    def _append_log(self, entry: dict) -> None:
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    # -- queries -----------------------------------------------------------

    def next_pending(self) -> ReviewTask | None:
        for task_id in self._order:
            if self.tasks[task_id].status == "pending":
                return self.tasks[task_id]
        return None

    def get_task(self, task_id: str) -> ReviewTask:
        task = self.tasks.get(task_id)
        if task is None:
            raise TaskNotFound(f"service: unknown task {task_id!r}")
        return task

    def image_png(self, image_id: str) -> bytes:
        pixels = self.images.get(image_id)
        if pixels is None:
            raise TaskNotFound(f"service: no image bytes for {image_id!r}")
        return png_bytes(pixels)

    # -- decisions ----------------------------------------------------------

    def decide(
        self,
        task_id: str,
        action: str,
        identity_id: str | None = None,
        override: bool = False,
        decided_by: str | None = None,
    ) -> ReviewTask:
        """Validate, persist to the log, then apply. The log write precedes
        every state change, so an acknowledged decision survives a crash."""
        with self._lock:
            task = self.get_task(task_id)
            if task.status != "pending":
                raise AlreadyDecided(f"service: task {task_id} already {task.status}")
            if action not in ACTIONS:
                raise InvalidDecision(f"service: unknown action {action!r}")
            if action == "confirm":
                if not identity_id:
                    raise InvalidDecision("service: confirm needs identity_id")
                candidate_ids = {c.identity_id for c in task.candidates}
                if identity_id not in candidate_ids and not override:
                    raise InvalidDecision(
                        f"service: {identity_id!r} is not a candidate for {task_id}; "
                        "set override to confirm anyway"
                    )
            entry = {
                "task_id": task_id,
                "action": action,
                "identity_id": identity_id,
                "override": bool(override),
                "decided_by": decided_by,
                "decided_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            }
            self._append_log(entry)
            return self._apply(entry, replay=False)

    def _apply(self, entry: dict, replay: bool) -> ReviewTask:
        task = self.get_task(entry["task_id"])
        if task.status != "pending":
            raise AlreadyDecided(f"service: task {entry['task_id']} decided twice in log")
        action = entry["action"]
        identity = entry.get("identity_id")
        if action == "confirm":
            task.status = "confirmed"
            task.decided_identity = identity
        elif action == "new_individual":
            if not identity:
                self._new_counter += 1
                identity = f"new-{self._new_counter:04d}"
            task.status = "new_individual"
            task.decided_identity = identity
        elif action == "skip":
            task.status = "skipped"
        else:
            raise InvalidDecision(f"service: unknown action {action!r} in log")
        task.decided_at = entry.get("decided_at")
        task.decided_by = entry.get("decided_by")

        if task.status in ("confirmed", "new_individual"):
            query = self._queries[task.task_id]
            self.store.add(
                [(query.image_id, task.decided_identity, query.date)],
                query.embedding[None, :],
                self.store.fingerprint,
            )
        return task

    # -- stats ---------------------------------------------------------------

    def stats(self) -> dict:
        from .evaluation import CaseResult, topk_accuracy

        counts = {"pending": 0, "confirmed": 0, "new_individual": 0, "skipped": 0}
        results = []
        for task in self.tasks.values():
            counts[task.status] += 1
            if task.status in ("confirmed", "new_individual"):
                relevance = np.array(
                    [c.identity_id == task.decided_identity for c in task.candidates], dtype=bool
                )
                results.append(
                    CaseResult(
                        query_id=task.query_image_id,
                        relevance=relevance,
                        n_relevant=int(relevance.sum()),
                    )
                )
        decided = counts["confirmed"] + counts["new_individual"] + counts["skipped"]
        return {
            "pending": counts["pending"],
            "decided": decided,
            "confirmed": counts["confirmed"],
            "new_individual": counts["new_individual"],
            "skipped": counts["skipped"],
            "top1_agreement": topk_accuracy(results, 1) if results else None,
            "top5_agreement": topk_accuracy(results, 5) if results else None,
        }


# ---------------------------------------------------------------------------
# HTTP adapter


_TASK_RE = re.compile(r"^/tasks/([^/]+)$")
_DECISION_RE = re.compile(r"^/tasks/([^/]+)/decision$")
_IMAGE_RE = re.compile(r"^/images/([^/]+)$")


def make_handler(service: ReviewService, ui_dir: str | None = None):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send_json(self, status: int, payload) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def _send_bytes(self, status: int, body: bytes, content_type: str) -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def do_OPTIONS(self):
            self.send_response(204)
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
            self.send_header("Access-Control-Allow-Headers", "Content-Type")
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self):
            if self.path == "/tasks/next":
                task = service.next_pending()
                if task is None:
                    self.send_response(204)
                    self.send_header("Access-Control-Allow-Origin", "*")
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                self._send_json(200, task.to_json())
                return
            if self.path == "/stats":
                self._send_json(200, service.stats())
                return
            m = _TASK_RE.match(self.path)
            if m:
                try:
                    self._send_json(200, service.get_task(m.group(1)).to_json())
                except TaskNotFound as exc:
                    self._send_json(404, {"error": str(exc)})
                return
            m = _IMAGE_RE.match(self.path)
            if m:
                try:
                    self._send_bytes(200, service.image_png(m.group(1)), "image/png")
                except TaskNotFound as exc:
                    self._send_json(404, {"error": str(exc)})
                return
            if ui_dir is not None:
                self._serve_static()
                return
            self._send_json(404, {"error": "service: no such route"})

        def _serve_static(self):
            rel = self.path.lstrip("/") or "index.html"
            rel = os.path.normpath(rel)
            if rel.startswith(".."):
                self._send_json(404, {"error": "service: no such route"})
                return
            full = os.path.join(ui_dir, rel)
            if not os.path.isfile(full):
                self._send_json(404, {"error": "service: no such route"})
                return
            ext = os.path.splitext(full)[1]
            ctype = {
                ".html": "text/html",
                ".js": "text/javascript",
                ".css": "text/css",
                ".png": "image/png",
            }.get(ext, "application/octet-stream")
            with open(full, "rb") as fh:
                self._send_bytes(200, fh.read(), ctype)

        def do_POST(self):
            m = _DECISION_RE.match(self.path)
            if not m:
                self._send_json(404, {"error": "service: no such route"})
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                self._send_json(400, {"error": "service: request body is not valid JSON"})
                return
            try:
                task = service.decide(
                    m.group(1),
                    action=body.get("action", ""),
                    identity_id=body.get("identity_id"),
                    override=bool(body.get("override", False)),
                    decided_by=body.get("decided_by"),
                )
            except (TaskNotFound, AlreadyDecided, InvalidDecision) as exc:
                self._send_json(exc.http_status, {"error": str(exc)})
                return
            self._send_json(200, task.to_json())

    return Handler


def serve(service: ReviewService, host: str = "127.0.0.1", port: int = 8765, ui_dir: str | None = None) -> ThreadingHTTPServer:
    """Start the HTTP server (returns it; call serve_forever or shutdown)."""
    server = ThreadingHTTPServer((host, port), make_handler(service, ui_dir))
    return server

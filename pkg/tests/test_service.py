import json
import threading

import httpx
import numpy as np
import pytest

from finid.catalogue import CatalogueStore
from finid.data import ImageRecord
from finid.errors import StoreError
from finid.evaluation import CaseResult, topk_accuracy
from finid.service import (
    AlreadyDecided,
    InvalidDecision,
    PendingQuery,
    ReviewService,
    TaskNotFound,
    serve,
)

FP = "c" * 64


def _store(n_identities=6, per_identity=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    store = CatalogueStore(dim=dim, fingerprint=FP)
    centers = {f"id{i}": rng.normal(scale=10.0, size=dim) for i in range(n_identities)}
    records, embs = [], []
    for ident, center in centers.items():
        for j in range(per_identity):
            records.append(ImageRecord(f"{ident}-g{j}", ident, "2013-02-01", np.zeros((1, 2, 2))))
            embs.append(center + rng.normal(scale=0.05, size=dim))
    store.add(records, np.stack(embs), FP)
    return store, centers


def _pending(centers, which, dim=4, noise=0.01, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for i, ident in enumerate(which):
        emb = centers[ident] + rng.normal(scale=noise, size=dim)
        out.append(PendingQuery(image_id=f"q{i:02d}", embedding=emb, date="2013-03-01"))
    return out


def _service(tmp_path, which=("id0", "id1", "id2"), **kw):
    store, centers = _store()
    pending = _pending(centers, which)
    svc = ReviewService(store, pending, str(tmp_path / "decisions.jsonl"), **kw)
    return svc, store, centers


class TestTaskQueue:
    def test_tasks_ordered_most_confident_first(self, tmp_path):
        store, centers = _store()
        pending = [
            PendingQuery("near", centers["id0"] + 0.001, date="2013-03-01"),
            PendingQuery("far", centers["id1"] + 2.0, date="2013-03-01"),
        ]
        svc = ReviewService(store, pending, str(tmp_path / "log.jsonl"))
        assert svc.next_pending().query_image_id == "near"
        uncertain = ReviewService(store, pending, str(tmp_path / "log2.jsonl"), order="uncertain")
        assert uncertain.next_pending().query_image_id == "far"

    def test_candidates_ranked_by_distance(self, tmp_path):
        svc, _, _ = _service(tmp_path)
        task = svc.next_pending()
        dists = [c.distance for c in task.candidates]
        assert dists == sorted(dists)
        assert [c.rank for c in task.candidates] == list(range(1, len(dists) + 1))

    def test_unknown_task_raises(self, tmp_path):
        svc, _, _ = _service(tmp_path)
        with pytest.raises(TaskNotFound):
            svc.get_task("task-nope")


class TestDecisions:
    def test_confirm_appends_to_store(self, tmp_path):
        svc, store, _ = _service(tmp_path)
        before = len(store)
        task = svc.next_pending()
        rank1 = task.candidates[0].identity_id
        decided = svc.decide(task.task_id, "confirm", identity_id=rank1)
        assert decided.status == "confirmed"
        assert len(store) == before + 1
        assert store.entries[-1].identity_id == rank1
        assert store.entries[-1].image_id == task.query_image_id

    def test_double_decision_conflicts_and_store_unchanged(self, tmp_path):
        svc, store, _ = _service(tmp_path)
        task = svc.next_pending()
        svc.decide(task.task_id, "skip")
        size = len(store)
        with pytest.raises(AlreadyDecided):
            svc.decide(task.task_id, "confirm", identity_id=task.candidates[0].identity_id)
        assert len(store) == size

    def test_confirm_requires_candidate_or_override(self, tmp_path):
        svc, store, _ = _service(tmp_path)
        task = svc.next_pending()
        with pytest.raises(InvalidDecision):
            svc.decide(task.task_id, "confirm", identity_id="definitely-not-a-candidate")
        decided = svc.decide(
            task.task_id, "confirm", identity_id="definitely-not-a-candidate", override=True
        )
        assert decided.decided_identity == "definitely-not-a-candidate"

    def test_new_individual_autonames(self, tmp_path):
        svc, store, _ = _service(tmp_path)
        t1 = svc.next_pending()
        d1 = svc.decide(t1.task_id, "new_individual")
        t2 = svc.next_pending()
        d2 = svc.decide(t2.task_id, "new_individual")
        assert d1.decided_identity == "new-0001"
        assert d2.decided_identity == "new-0002"
        assert store.entries[-1].identity_id == "new-0002"

    def test_skip_does_not_touch_store(self, tmp_path):
        svc, store, _ = _service(tmp_path)
        size = len(store)
        task = svc.next_pending()
        decided = svc.decide(task.task_id, "skip")
        assert decided.status == "skipped"
        assert len(store) == size


class TestDurability:
    def test_kill_and_replay_reconstructs_state(self, tmp_path):
        log = str(tmp_path / "decisions.jsonl")
        store, centers = _store()
        pending = _pending(centers, ("id0", "id1", "id2", "id3"))
        svc = ReviewService(store, pending, log)
        t1 = svc.next_pending()
        svc.decide(t1.task_id, "confirm", identity_id=t1.candidates[0].identity_id)
        t2 = svc.next_pending()
        svc.decide(t2.task_id, "new_individual")
        t3 = svc.next_pending()
        svc.decide(t3.task_id, "skip")
        statuses = {t.task_id: (t.status, t.decided_identity) for t in svc.tasks.values()}
        entries = [(e.image_id, e.identity_id) for e in store.entries]

        # "crash": rebuild everything from the base store + log
        store2, centers2 = _store()
        svc2 = ReviewService(store2, _pending(centers2, ("id0", "id1", "id2", "id3")), log)
        assert {t.task_id: (t.status, t.decided_identity) for t in svc2.tasks.values()} == statuses
        assert [(e.image_id, e.identity_id) for e in store2.entries] == entries

    def test_log_is_append_only_jsonl(self, tmp_path):
        svc, _, _ = _service(tmp_path)
        t = svc.next_pending()
        svc.decide(t.task_id, "skip", decided_by="tester")
        lines = open(svc.log_path).read().strip().split("\n")
        assert len(lines) == 1
        entry = json.loads(lines[0])
        assert entry["task_id"] == t.task_id
        assert entry["action"] == "skip"
        assert entry["decided_by"] == "tester"


class TestStats:
    def test_all_rank1_correct_gives_full_agreement(self, tmp_path):
        svc, _, _ = _service(tmp_path)
        while (task := svc.next_pending()) is not None:
            svc.decide(task.task_id, "confirm", identity_id=task.candidates[0].identity_id)
        stats = svc.stats()
        assert stats["pending"] == 0
        assert stats["top1_agreement"] == 1.0
        assert stats["top5_agreement"] == 1.0

    def test_agreement_equals_topk_accuracy(self, tmp_path):
        svc, _, _ = _service(tmp_path, which=("id0", "id1", "id2", "id3", "id4"))
        actions = ["rank1", "rank2", "new", "rank1", "skip"]
        human_cases = []
        for action in actions:
            task = svc.next_pending()
            if action == "skip":
                svc.decide(task.task_id, "skip")
                continue
            if action == "new":
                decided = svc.decide(task.task_id, "new_individual")
            else:
                rank = 0 if action == "rank1" else 1
                decided = svc.decide(
                    task.task_id, "confirm", identity_id=task.candidates[rank].identity_id
                )
            relevance = np.array(
                [c.identity_id == decided.decided_identity for c in task.candidates], dtype=bool
            )
            human_cases.append(
                CaseResult(query_id=task.query_image_id, relevance=relevance, n_relevant=int(relevance.sum()))
            )
        stats = svc.stats()
        assert stats["top1_agreement"] == pytest.approx(topk_accuracy(human_cases, 1))
        assert stats["top5_agreement"] == pytest.approx(topk_accuracy(human_cases, 5))
        assert stats["skipped"] == 1

    def test_no_decisions_yields_null_agreement(self, tmp_path):
        svc, _, _ = _service(tmp_path)
        stats = svc.stats()
        assert stats["top1_agreement"] is None
        assert stats["decided"] == 0


@pytest.fixture
def http_service(tmp_path):
    store, centers = _store()
    pending = _pending(centers, ("id0", "id1", "id2"))
    images = {f"q{i:02d}": np.random.default_rng(i).uniform(size=(1, 8, 8)) for i in range(3)}
    for e in store.entries:
        images[e.image_id] = np.random.default_rng(1).uniform(size=(1, 8, 8))
    svc = ReviewService(store, pending, str(tmp_path / "log.jsonl"), images=images)
    server = serve(svc, host="127.0.0.1", port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield base, svc
    server.shutdown()
    server.server_close()


class TestHTTP:
    def test_full_review_flow(self, http_service):
        base, svc = http_service
        with httpx.Client(base_url=base, timeout=5.0) as client:
            decided = 0
            while True:
                resp = client.get("/tasks/next")
                if resp.status_code == 204:
                    break
                task = resp.json()
                assert task["status"] == "pending"
                assert [c["rank"] for c in task["candidates"]] == [1, 2, 3, 4, 5]
                rank1 = task["candidates"][0]["identity_id"]
                post = client.post(
                    f"/tasks/{task['task_id']}/decision",
                    json={"action": "confirm", "identity_id": rank1},
                )
                assert post.status_code == 200
                assert post.json()["status"] == "confirmed"
                decided += 1
            assert decided == 3
            stats = client.get("/stats").json()
            assert stats["decided"] == 3
            assert stats["top1_agreement"] == 1.0

    def test_double_post_conflicts(self, http_service):
        base, _ = http_service
        with httpx.Client(base_url=base, timeout=5.0) as client:
            task = client.get("/tasks/next").json()
            body = {"action": "skip"}
            assert client.post(f"/tasks/{task['task_id']}/decision", json=body).status_code == 200
            again = client.post(f"/tasks/{task['task_id']}/decision", json=body)
            assert again.status_code == 409
            assert "error" in again.json()

    def test_unknown_task_404_bad_identity_422(self, http_service):
        base, _ = http_service
        with httpx.Client(base_url=base, timeout=5.0) as client:
            assert client.get("/tasks/task-missing").status_code == 404
            task = client.get("/tasks/next").json()
            resp = client.post(
                f"/tasks/{task['task_id']}/decision",
                json={"action": "confirm", "identity_id": "nope"},
            )
            assert resp.status_code == 422

    def test_image_endpoint_serves_png(self, http_service):
        base, _ = http_service
        with httpx.Client(base_url=base, timeout=5.0) as client:
            task = client.get("/tasks/next").json()
            resp = client.get(task["query_image_url"])
            assert resp.status_code == 200
            assert resp.headers["content-type"] == "image/png"
            assert resp.content[:8] == b"\x89PNG\r\n\x1a\n"
            assert client.get("/images/absent").status_code == 404

"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with the measured values (run with `pytest -s` to watch).

The heavyweight learning criteria (end-to-end and ablations) train real
models and take several minutes each; everything else is fast.
"""

import os
import time
from dataclasses import replace

import numpy as np
import pytest

import finid.tensor as T
from finid.catalogue import CatalogueStore, store_load, store_save
from finid.checkpoint import file_sha256
from finid.data import ImageRecord, Manifest
from finid.errors import FinidError
from finid.evaluation import (
    CaseResult,
    build_query_cases,
    embed_manifest,
    evaluate_fold,
    make_folds,
    mean_average_precision,
    score_case,
    summarize_ablation,
    topk_accuracy,
)
from finid.loss import accumulate_minibatch_gradient, batch_hard_loss
from finid.model import EmbeddingNetConfig, embed, init_params
from finid.service import PendingQuery, ReviewService
from finid.synth import synth_generate
from finid.tensor import Tensor
from finid.trainer import Schedule, TrainRunConfig, train

from oracles import (
    average_precision_definition,
    batch_hard_enumeration,
    fd_relative_error,
    topk_hit_definition,
)
from test_tensor import PRIMITIVE_CASES


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. gradient correctness


def test_gradient_correctness():
    started = time.monotonic()
    worst_primitive = 0.0
    cases = 0
    for name, tf, _, sampler in PRIMITIVE_CASES:
        for seed in range(6):
            rng = np.random.default_rng(41_000 + cases)
            x0 = sampler(rng)

            def f_np(arr):
                return tf(Tensor(arr)).item()

            with T.Tape() as tape:
                xt = Tensor(x0, requires_grad=True)
                T.backward(tape, tf(xt))
            err = fd_relative_error(f_np, x0, xt.grad)
            worst_primitive = max(worst_primitive, err)
            cases += 1
            assert err < 1e-5, f"primitive {name} seed {seed}: rel err {err}"

    # full composition: embed -> batch-hard loss, gradients w.r.t. every
    # weight tensor, on tie-free batches
    tiny = EmbeddingNetConfig(
        input_side=8, input_channels=1, conv_blocks=((4, 3, True),), head_hidden=12, embed_dim=6
    )
    worst_composition = 0.0
    for seed in (0, 1, 2):
        params = init_params(replace(tiny, init_seed=seed))
        rng = np.random.default_rng(52_000 + seed)
        base = rng.uniform(0.1, 0.9, size=(2, 1, 8, 8))
        batch = np.clip(np.repeat(base, 2, axis=0) + rng.normal(0, 0.05, size=(4, 1, 8, 8)), 0, 1)
        labels = ["a", "a", "b", "b"]
        grads, _, _ = accumulate_minibatch_gradient(params, batch, labels, update_running=False)
        for pname, p in params.trainables():
            original = p.data.copy()

            def f_np(arr, p=p):
                p.data = np.asarray(arr, dtype=np.float64)
                try:
                    e = embed(params, batch, mode="train", update_running=False)
                    return float(batch_hard_loss(e, labels).total.data)
                finally:
                    p.data = original

            err = fd_relative_error(f_np, original, grads[pname])
            worst_composition = max(worst_composition, err)
            assert err < 1e-4, f"composition seed {seed} {pname}: rel err {err}"

    elapsed = time.monotonic() - started
    _report(
        "gradient-correctness",
        worst_primitive < 1e-5 and worst_composition < 1e-4 and elapsed < 60.0,
        f"{cases} primitive cases, worst {worst_primitive:.2e}; "
        f"composition worst {worst_composition:.2e}; {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. batch-hard oracle equivalence


def test_batch_hard_oracle_equivalence():
    worst = 0.0
    for case_index in range(100):
        rng = np.random.default_rng(61_000 + case_index)
        p = int(rng.integers(2, 6))
        k = int(rng.integers(2, 4))
        labels = [f"id{i}" for i in range(p) for _ in range(k)]
        e = rng.normal(size=(p * k, int(rng.integers(2, 9))))
        margin = None if case_index % 2 == 0 else 0.3
        res = batch_hard_loss(Tensor(e), labels, margin=margin, guarded=False)
        hp, hn, per_anchor, total = batch_hard_enumeration(e, labels, margin)
        worst = max(
            worst,
            float(np.abs(res.hardest_pos - hp).max()),
            float(np.abs(res.hardest_neg - hn).max()),
            float(np.abs(res.per_anchor - per_anchor).max()),
            abs(float(res.total.data) - total),
        )
    _report("batch-hard-oracle", worst < 1e-12, f"100 batches, worst abs diff {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. metric oracle equivalence


def test_metric_oracle_equivalence():
    worst = 0.0
    rng = np.random.default_rng(71_000)
    for _ in range(200):
        n = int(rng.integers(1, 31))
        relevance = rng.uniform(size=n) < 0.25
        if not relevance.any():
            relevance[int(rng.integers(n))] = True
        case = CaseResult(query_id="q", relevance=relevance, n_relevant=int(relevance.sum()))
        worst = max(worst, abs(case.ap - average_precision_definition(relevance)))
        for k in (1, 5):
            assert case.hit_at(k) == topk_hit_definition(relevance, k)

    def ap_of(rel):
        r = np.array(rel, dtype=bool)
        return CaseResult(query_id="q", relevance=r, n_relevant=int(r.sum())).ap

    hand = (
        ap_of([True] + [False] * 9) == 1.0
        and ap_of([False, True] + [False] * 8) == 0.5
        # hand evaluation of the AP sum: (precision@1 + precision@3) / R
        and ap_of([True, False, True, False]) == (1.0 + 2.0 / 3.0) / 2.0
    )
    _report(
        "metric-oracle",
        worst < 1e-12 and hand,
        f"200 instances, worst abs diff {worst:.2e}; hand cases AP=1, 0.5, 5/6 exact: {hand}",
    )


# ---------------------------------------------------------------------------
# 4. protocol invariants


def test_protocol_invariants():
    big = synth_generate(185, 2, 1, side=16, seed=3)
    folds = make_folds(big, 5)
    sizes = [len(f.identities) for f in folds]
    union: set[str] = set()
    disjoint = True
    for f in folds:
        disjoint &= not (union & set(f.identities))
        union.update(f.identities)
    partition_ok = disjoint and union == set(big.identities) and sizes == [37] * 5

    fold = synth_generate(10, 8, 3, side=16, seed=4)
    by_id = {r.image_id: r for r in fold.records}
    cases, dropped = build_query_cases(fold, np.random.default_rng(5))
    exclusion_ok = True
    for case in cases:
        for gid in case.gallery_ids:
            rec = by_id[gid]
            if rec.identity_id == case.identity_id and rec.date == case.date:
                exclusion_ok = False
    _report(
        "protocol-invariants",
        partition_ok and exclusion_ok,
        f"5 folds of {sizes}; exclusion scanned over {len(cases)} cases "
        f"({sum(len(c.gallery_ids) for c in cases)} gallery entries), dropped {dropped}",
    )


# ---------------------------------------------------------------------------
# 5. distractor monotonicity


def test_distractor_monotonicity():
    rng = np.random.default_rng(81_000)
    fold = synth_generate(12, 6, 3, side=16, seed=6)
    # identity-clustered random embeddings: realistic-ish geometry, instant
    centers = {ident: rng.normal(scale=3.0, size=16) for ident in fold.identities}
    emb = {r.image_id: centers[r.identity_id] + rng.normal(scale=1.0, size=16) for r in fold.records}

    pool_records = [
        ImageRecord(f"dst{i:04d}", f"dident{i:04d}", "2010-01-01", np.zeros((1, 2, 2)))
        for i in range(1200)
    ]
    pool = Manifest(pool_records)
    demb = {r.image_id: rng.normal(scale=3.0, size=16) for r in pool_records}

    cases, _ = build_query_cases(fold, np.random.default_rng(7))
    shuffled = sorted(r.image_id for r in pool_records)
    order = np.random.default_rng(8).permutation(len(shuffled))
    shuffled = [shuffled[i] for i in order]
    pool_matrix = np.stack([demb[i] for i in shuffled])

    counts = [0, 150, 300, 600, 900, 1200]
    prev = None
    violations = 0
    for count in counts:
        extra_ids = shuffled[:count]
        extra = pool_matrix[:count] if count else None
        results = {c.query_id: score_case(c, emb, extra_ids, extra) for c in cases}
        if prev is not None:
            for qid, res in results.items():
                if res.ap > prev[qid].ap:
                    violations += 1
                for k in (1, 5):
                    if res.hit_at(k) > prev[qid].hit_at(k):
                        violations += 1
        prev = results
    _report(
        "distractor-monotonicity",
        violations == 0,
        f"{len(cases)} cases x counts {counts}: {violations} per-case violations (exact, zero tolerance)",
    )


# ---------------------------------------------------------------------------
# 6. end-to-end learning (surrogate for the paper's headline table)

E2E_MODEL = EmbeddingNetConfig()  # 32x32, 16/32/64 trunk, 1024 head, D=128


def test_end_to_end_learning():
    started = time.monotonic()
    train_manifest = synth_generate(50, 12, 3, side=32, seed=0)
    heldout = synth_generate(15, 12, 3, side=32, seed=500, id_prefix="ho")

    top1s, top5s = [], []
    for seed in (0, 1, 2):
        config = TrainRunConfig(
            model=replace(E2E_MODEL, init_seed=seed),
            schedule=Schedule(total_batches=2000, warm_batches=640),
            p=10,
            k=4,
            soft_margin=True,
            seed_sampler=seed + 1,
            seed_augment=seed + 2,
        )
        result = train(config, train_manifest)
        losses = [row.loss for row in result.trace]
        assert np.isfinite(losses).all(), f"seed {seed}: non-finite loss in trace"
        embeddings = embed_manifest(result.params, heldout)
        report, _ = evaluate_fold(heldout, embeddings, np.random.default_rng(42))
        top1s.append(report.top1)
        top5s.append(report.top5)

    elapsed = time.monotonic() - started
    mean_top1 = float(np.mean(top1s))
    mean_top5 = float(np.mean(top5s))
    ok = mean_top1 >= 0.85 and mean_top5 >= 0.95 and elapsed <= 900.0
    _report(
        "end-to-end-learning",
        ok,
        f"held-out top1 {100 * mean_top1:.1f}% (per seed {[f'{100 * v:.1f}' for v in top1s]}), "
        f"top5 {100 * mean_top5:.1f}%, runtime {elapsed:.0f}s <= 900s",
    )


# ---------------------------------------------------------------------------
# 7. ablation trends

ABLATION_MODEL = EmbeddingNetConfig(head_hidden=256)
ABLATION_SCHEDULE = Schedule(total_batches=400, warm_batches=200)


def _ablation_base():
    return TrainRunConfig(model=ABLATION_MODEL, schedule=ABLATION_SCHEDULE, p=8, k=4)


def test_ablation_trends():
    from finid.evaluation import ablation_images_per_id, ablation_individuals

    pool = synth_generate(50, 12, 3, side=32, seed=0)
    heldout = synth_generate(15, 12, 3, side=32, seed=500, id_prefix="ho")
    seeds = [0, 1, 2]

    size_rows = ablation_individuals(pool, heldout, [10, 25, 50], seeds, _ablation_base())
    size_summary = summarize_ablation(size_rows)
    sizes_ok = True
    for smaller, larger in zip(size_summary, size_summary[1:]):
        slack = 2.0 * max(smaller["top5_se"], larger["top5_se"])
        if larger["top5"] < smaller["top5"] - slack:
            sizes_ok = False

    cap_rows = ablation_images_per_id(pool, heldout, [2, 4, 8, 12], seeds, _ablation_base())
    cap_summary = {s["size"]: s for s in summarize_ablation(cap_rows)}
    caps_ok = cap_summary[8]["top5"] >= cap_summary[2]["top5"]

    detail_sizes = ", ".join(f"{s['size']}ids: {100 * s['top5']:.1f}+-{100 * s['top5_se']:.1f}" for s in size_summary)
    detail_caps = ", ".join(f"cap{c}: {100 * cap_summary[c]['top5']:.1f}" for c in (2, 4, 8, 12))
    _report(
        "ablation-trends",
        sizes_ok and caps_ok,
        f"top5 by train size [{detail_sizes}]; by image cap [{detail_caps}]",
    )


# ---------------------------------------------------------------------------
# 8. determinism & durability


def test_determinism_and_durability(tmp_path):
    manifest = synth_generate(8, 6, 2, side=16, seed=9)
    tiny = TrainRunConfig(
        model=EmbeddingNetConfig(
            input_side=16, conv_blocks=((8, 3, True), (16, 3, True)), head_hidden=32,
            embed_dim=16, init_seed=1,
        ),
        schedule=Schedule(total_batches=16, warm_batches=8),
        p=3,
        k=2,
        checkpoint_every=8,
    )

    run_a = train(tiny, manifest, checkpoint_dir=str(tmp_path / "a"), trace_path=str(tmp_path / "a.csv"))
    run_b = train(tiny, manifest, checkpoint_dir=str(tmp_path / "b"), trace_path=str(tmp_path / "b.csv"))
    ckpt_identical = file_sha256(run_a.final_checkpoint) == file_sha256(run_b.final_checkpoint)
    trace_identical = open(tmp_path / "a.csv", "rb").read() == open(tmp_path / "b.csv", "rb").read()

    mid = str(tmp_path / "a" / "checkpoint-000008.finck")
    resumed = train(tiny, manifest, checkpoint_dir=str(tmp_path / "c"), resume_from=mid)
    resume_identical = file_sha256(resumed.final_checkpoint) == file_sha256(run_a.final_checkpoint)

    # store round-trip
    fingerprint = file_sha256(run_a.final_checkpoint)
    embeddings = embed_manifest(run_a.params, manifest)
    store = CatalogueStore(dim=16, fingerprint=fingerprint)
    store.add(manifest.records, np.stack([embeddings[r.image_id] for r in manifest.records]), fingerprint)
    store_path = str(tmp_path / "c.finstore")
    store_save(store, store_path)
    loaded = store_load(store_path)
    store_ok = len(loaded) == len(store) and all(
        a.image_id == b.image_id and np.array_equal(a.embedding, b.embedding)
        for a, b in zip(store.entries, loaded.entries)
    )

    # decision-log replay
    def fresh_service(log):
        base = store_load(store_path)
        rng = np.random.default_rng(10)
        pending = [
            PendingQuery(image_id=f"q{i}", embedding=base.entries[i * 3].embedding + rng.normal(scale=0.01, size=16))
            for i in range(4)
        ]
        return ReviewService(base, pending, log)

    log = str(tmp_path / "decisions.jsonl")
    svc = fresh_service(log)
    t = svc.next_pending()
    svc.decide(t.task_id, "confirm", identity_id=t.candidates[0].identity_id)
    t = svc.next_pending()
    svc.decide(t.task_id, "new_individual")
    t = svc.next_pending()
    svc.decide(t.task_id, "skip")
    before = [(e.image_id, e.identity_id, e.embedding.tobytes()) for e in svc.store.entries]
    statuses = {t.task_id: t.status for t in svc.tasks.values()}

    replayed = fresh_service(log)
    replay_ok = (
        [(e.image_id, e.identity_id, e.embedding.tobytes()) for e in replayed.store.entries] == before
        and {t.task_id: t.status for t in replayed.tasks.values()} == statuses
    )

    ok = ckpt_identical and trace_identical and resume_identical and store_ok and replay_ok
    _report(
        "determinism-durability",
        ok,
        f"checkpoints identical: {ckpt_identical}; traces identical: {trace_identical}; "
        f"resume==straight: {resume_identical}; store round-trip: {store_ok}; log replay: {replay_ok}",
    )


# ---------------------------------------------------------------------------
# 9. primary stands alone


def test_primary_runs_without_secondary():
    import finid

    pkg_dir = os.path.dirname(finid.__file__)
    mentions = []
    for name in os.listdir(pkg_dir):
        if name.endswith(".py"):
            text = open(os.path.join(pkg_dir, name), encoding="utf-8").read()
            if "frontend" in text:
                mentions.append(name)
    _report(
        "primary-standalone",
        not mentions,
        "python package has no dependency on the review-ui frontend"
        if not mentions
        else f"frontend referenced in {mentions}",
    )

"""Open-set retrieval evaluation: systematic identity folds, query/gallery
construction with the same-day exclusion rule, ranking, top-k accuracy,
mAP, distractor sweeps, and training-set-size ablation harnesses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Manifest
from .errors import ProtocolError
from .model import ModelParams, embed


# ---------------------------------------------------------------------------
# embeddings


def embed_manifest(params: ModelParams, manifest: Manifest, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode embeddings for every record, keyed by image id."""
    from .data import resize  # local import to keep module deps one-way

    side = params.config.input_side
    out: dict[str, np.ndarray] = {}
    records = manifest.records
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        imgs = []
        for rec in chunk:
            pixels = rec.pixels
            if pixels.shape[1] != side or pixels.shape[2] != side:
                pixels = resize(pixels, side)
            imgs.append(pixels)
        e = embed(params, np.stack(imgs), mode="eval").data
        for rec, row in zip(chunk, e):
            out[rec.image_id] = row
    return out


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    identities: tuple[str, ...]


def make_folds(manifest: Manifest, n_folds: int = 5) -> list[Fold]:
    """Sort identities by descending image count (ties by id), then deal
    every n-th identity into the same fold."""
    identities = manifest.identities
    if len(identities) < n_folds:
        raise ProtocolError(
            f"eval: {len(identities)} identities cannot fill {n_folds} folds"
        )
    ordered = sorted(identities, key=lambda ident: (-len(manifest.by_identity[ident]), ident))
    return [
        Fold(index=j, identities=tuple(ordered[j::n_folds]))
        for j in range(n_folds)
    ]


# ---------------------------------------------------------------------------
# query cases


@dataclass
class QueryCase:
    query_id: str
    identity_id: str
    date: str
    gallery_ids: list[str]
    relevant_ids: frozenset[str]


def build_query_cases(
    fold_manifest: Manifest, rng: np.random.Generator
) -> tuple[list[QueryCase], int]:
    """One query per (identity, day); the gallery excludes every image of
    the query identity taken on the query day. Cases whose relevant set is
    emptied by the exclusion are dropped and counted."""
    all_records = sorted(fold_manifest.records, key=lambda r: r.image_id)
    cases: list[QueryCase] = []
    dropped = 0
    for identity in fold_manifest.identities:
        recs = fold_manifest.by_identity[identity]
        for date in fold_manifest.dates_by_identity[identity]:
            day_records = sorted((r for r in recs if r.date == date), key=lambda r: r.image_id)
            query = day_records[int(rng.integers(len(day_records)))]
            excluded = {r.image_id for r in day_records}
            gallery = [r for r in all_records if not (r.identity_id == identity and r.date == date)]
            relevant = frozenset(r.image_id for r in gallery if r.identity_id == identity)
            if not relevant:
                dropped += 1
                continue
            cases.append(
                QueryCase(
                    query_id=query.image_id,
                    identity_id=identity,
                    date=date,
                    gallery_ids=[r.image_id for r in gallery],
                    relevant_ids=relevant,
                )
            )
    return cases, dropped


def rank(query_embedding: np.ndarray, gallery_embeddings: np.ndarray, gallery_ids) -> np.ndarray:
    """Gallery permutation by ascending Euclidean distance; ties break by
    record id."""
    if gallery_embeddings.shape[0] == 0:
        raise ProtocolError("eval: cannot rank an empty gallery")
    diff = gallery_embeddings - query_embedding[None, :]
    dists = np.sqrt((diff * diff).sum(axis=1))
    return np.lexsort((np.asarray(gallery_ids), dists))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class CaseResult:
    query_id: str
    relevance: np.ndarray  # bool, in rank order
    n_relevant: int
    ap: float = field(init=False)

    def __post_init__(self):
        self.ap = _average_precision(self.relevance, self.n_relevant)

    def hit_at(self, k: int) -> bool:
        return bool(self.relevance[:k].any())


def _average_precision(relevance: np.ndarray, n_relevant: int) -> float:
    if n_relevant == 0:
        return 0.0
    hits = np.cumsum(relevance)
    ranks = np.arange(1, len(relevance) + 1)
    return float((hits[relevance] / ranks[relevance]).sum() / n_relevant)


def topk_accuracy(results: list[CaseResult], k: int) -> float:
    if k < 1:
        raise ProtocolError(f"eval: k must be >= 1, got {k}")
    if not results:
        raise ProtocolError("eval: no query cases to score")
    return float(np.mean([r.hit_at(k) for r in results]))


def mean_average_precision(results: list[CaseResult]) -> float:
    if not results:
        raise ProtocolError("eval: no query cases to score")
    return float(np.mean([r.ap for r in results]))


def score_case(
    case: QueryCase,
    embeddings: dict[str, np.ndarray],
    extra_ids: list[str] | None = None,
    extra_embeddings: np.ndarray | None = None,
) -> CaseResult:
    ids = list(case.gallery_ids)
    gallery = np.stack([embeddings[i] for i in ids])
    if extra_ids:
        ids = ids + list(extra_ids)
        gallery = np.vstack([gallery, extra_embeddings])
    order = rank(embeddings[case.query_id], gallery, ids)
    relevance = np.array([ids[i] in case.relevant_ids for i in order], dtype=bool)
    return CaseResult(query_id=case.query_id, relevance=relevance, n_relevant=len(case.relevant_ids))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    fold: int
    distractors: int
    n_queries: int
    dropped_queries: int
    top1: float
    top5: float
    mean_ap: float
    per_query: list[dict] = field(default_factory=list)

    def validate(self) -> None:
        for name, value in (("top1", self.top1), ("top5", self.top5), ("mAP", self.mean_ap)):
            if not (0.0 <= value <= 1.0):
                raise ProtocolError(f"eval: {name} out of range: {value}")
        if self.top1 > self.top5:
            raise ProtocolError(f"eval: top1 {self.top1} exceeds top5 {self.top5}")


def make_report(
    results: list[CaseResult], fold: int = 0, distractors: int = 0, dropped: int = 0
) -> EvalReport:
    report = EvalReport(
        fold=fold,
        distractors=distractors,
        n_queries=len(results),
        dropped_queries=dropped,
        top1=topk_accuracy(results, 1),
        top5=topk_accuracy(results, 5),
        mean_ap=mean_average_precision(results),
        per_query=[
            {
                "query_id": r.query_id,
                "ap": r.ap,
                "hit1": r.hit_at(1),
                "hit5": r.hit_at(5),
                "n_relevant": r.n_relevant,
                "first_relevant_rank": int(np.argmax(r.relevance)) + 1 if r.relevance.any() else None,
            }
            for r in results
        ],
    )
    report.validate()
    return report


def evaluate_fold(
    fold_manifest: Manifest,
    embeddings: dict[str, np.ndarray],
    rng: np.random.Generator,
    fold: int = 0,
) -> tuple[EvalReport, list[QueryCase]]:
    cases, dropped = build_query_cases(fold_manifest, rng)
    if not cases:
        raise ProtocolError("eval: every query case was dropped by the same-day exclusion")
    results = [score_case(c, embeddings) for c in cases]
    return make_report(results, fold=fold, dropped=dropped), cases


# ---------------------------------------------------------------------------
# distractors


def distractor_sweep(
    cases: list[QueryCase],
    embeddings: dict[str, np.ndarray],
    distractor_manifest: Manifest,
    distractor_embeddings: dict[str, np.ndarray],
    counts: list[int],
    rng: np.random.Generator,
    fold: int = 0,
    dropped: int = 0,
) -> list[EvalReport]:
    """Metrics under nested distractor galleries of increasing size.

    The pool is shuffled once; count c uses the first c entries, so galleries
    are nested and per-case degradation is exactly monotone."""
    if sorted(counts) != list(counts):
        raise ProtocolError(f"eval: distractor counts must ascend, got {counts}")
    case_identities = {c.identity_id for c in cases}
    pool_identities = set(distractor_manifest.identities)
    overlap = case_identities & pool_identities
    if overlap:
        raise ProtocolError(
            f"eval: distractor identities overlap the fold: {sorted(overlap)[:5]}"
        )
    pool_ids = sorted(r.image_id for r in distractor_manifest.records)
    if counts and counts[-1] > len(pool_ids):
        raise ProtocolError(
            f"eval: pool of {len(pool_ids)} distractors cannot reach count {counts[-1]}"
        )
    order = rng.permutation(len(pool_ids))
    shuffled = [pool_ids[i] for i in order]
    pool_matrix = np.stack([distractor_embeddings[i] for i in shuffled]) if shuffled else None

    reports = []
    for count in counts:
        extra_ids = shuffled[:count]
        extra = pool_matrix[:count] if count else None
        results = [score_case(c, embeddings, extra_ids, extra) for c in cases]
        reports.append(make_report(results, fold=fold, distractors=count, dropped=dropped))
    return reports


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationRow:
    size: int
    seed: int
    top1: float
    top5: float
    mean_ap: float


def _train_and_score(train_manifest, eval_manifest, train_config, case_seed):
    from .trainer import train  # deferred: trainer imports data/loss/model

    result = train(train_config, train_manifest)
    embeddings = embed_manifest(result.params, eval_manifest)
    report, _ = evaluate_fold(eval_manifest, embeddings, np.random.default_rng(case_seed))
    return report


def ablation_individuals(
    train_pool: Manifest,
    eval_fold: Manifest,
    sizes: list[int],
    seeds: list[int],
    train_config,
    case_seed: int = 9001,
) -> list[AblationRow]:
    """Train on random identity subsets of each size, score on a fixed fold."""
    from dataclasses import replace

    identities = train_pool.identities
    rows = []
    for size in sizes:
        if size < 1 or size > len(identities):
            raise ProtocolError(
                f"eval: ablation size {size} outside [1, {len(identities)}]"
            )
        for seed in seeds:
            rng = np.random.default_rng([seed, size, 17])
            chosen = [identities[i] for i in rng.choice(len(identities), size=size, replace=False)]
            sub = train_pool.subset(chosen)
            cfg = replace(train_config, seed_sampler=seed, seed_augment=seed + 1)
            report = _train_and_score(sub, eval_fold, cfg, case_seed)
            rows.append(AblationRow(size=size, seed=seed, top1=report.top1, top5=report.top5, mean_ap=report.mean_ap))
    return rows


def ablation_images_per_id(
    train_pool: Manifest,
    eval_fold: Manifest,
    caps: list[int],
    seeds: list[int],
    train_config,
    case_seed: int = 9001,
) -> list[AblationRow]:
    """Cap the number of images per training identity, score on a fixed fold."""
    from dataclasses import replace

    rows = []
    for cap in caps:
        if cap < 1:
            raise ProtocolError(f"eval: image cap must be >= 1, got {cap}")
        for seed in seeds:
            rng = np.random.default_rng([seed, cap, 23])
            sub = train_pool.cap_images_per_identity(cap, rng)
            cfg = replace(train_config, seed_sampler=seed, seed_augment=seed + 1)
            report = _train_and_score(sub, eval_fold, cfg, case_seed)
            rows.append(AblationRow(size=cap, seed=seed, top1=report.top1, top5=report.top5, mean_ap=report.mean_ap))
    return rows


def summarize_ablation(rows: list[AblationRow]) -> list[dict]:
    """Mean and standard error per size across seeds."""
    out = []
    for size in sorted({r.size for r in rows}):
        group = [r for r in rows if r.size == size]
        t1, t1se = mean_and_se([r.top1 for r in group])
        t5, t5se = mean_and_se([r.top5 for r in group])
        m, mse_ = mean_and_se([r.mean_ap for r in group])
        out.append(
            {
                "size": size,
                "seeds": len(group),
                "top1": t1,
                "top1_se": t1se,
                "top5": t5,
                "top5_se": t5se,
                "mean_ap": m,
                "mean_ap_se": mse_,
            }
        )
    return out


# ---------------------------------------------------------------------------
# 2-D projection (plumbing stand-in for the embedding scatter plot)


def project_2d(embeddings: np.ndarray) -> np.ndarray:
    """Top-2 principal components with a deterministic sign convention: the
    largest-magnitude loading of each component is positive."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ProtocolError(f"eval: project_2d expects [N, D], got {x.shape}")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], x.shape[1]))])
    fixed = []
    for row in comps:
        pivot = int(np.argmax(np.abs(row)))
        fixed.append(-row if row[pivot] < 0 else row)
    return centered @ np.vstack(fixed).T


# ---------------------------------------------------------------------------
# serialization


def mean_and_se(values) -> tuple[float, float]:
    vals = np.asarray(list(values), dtype=np.float64)
    if len(vals) < 2:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def reports_to_json(reports: list[EvalReport], include_per_query: bool = True) -> str:
    payload = {
        "reports": [
            {
                "fold": r.fold,
                "distractors": r.distractors,
                "n_queries": r.n_queries,
                "dropped_queries": r.dropped_queries,
                "top1_percent": 100.0 * r.top1,
                "top5_percent": 100.0 * r.top5,
                "map_percent": 100.0 * r.mean_ap,
                **({"per_query": r.per_query} if include_per_query else {}),
            }
            for r in reports
        ]
    }
    groups = sorted({r.distractors for r in reports})
    summary = []
    for d in groups:
        rows = [r for r in reports if r.distractors == d]
        t1, t1se = mean_and_se([r.top1 for r in rows])
        t5, t5se = mean_and_se([r.top5 for r in rows])
        m, mse_ = mean_and_se([r.mean_ap for r in rows])
        summary.append(
            {
                "distractors": d,
                "folds": len(rows),
                "top1_percent": 100.0 * t1,
                "top1_se": 100.0 * t1se,
                "top5_percent": 100.0 * t5,
                "top5_se": 100.0 * t5se,
                "map_percent": 100.0 * m,
                "map_se": 100.0 * mse_,
            }
        )
    payload["summary"] = summary
    return json.dumps(payload, indent=2, sort_keys=True)


CSV_HEADER = "fold,distractors,top1,top5,map,dropped_queries"


def reports_to_csv(reports: list[EvalReport]) -> str:
    """Aggregate rows (percent metrics) plus mean and standard-error rows."""
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.fold},{r.distractors},{100 * r.top1:.4f},{100 * r.top5:.4f},"
            f"{100 * r.mean_ap:.4f},{r.dropped_queries}"
        )
    for d in sorted({r.distractors for r in reports}):
        rows = [r for r in reports if r.distractors == d]
        if len(rows) < 2:
            continue
        t1, t1se = mean_and_se([r.top1 for r in rows])
        t5, t5se = mean_and_se([r.top5 for r in rows])
        m, mse_ = mean_and_se([r.mean_ap for r in rows])
        total_dropped = sum(r.dropped_queries for r in rows)
        lines.append(f"mean,{d},{100 * t1:.4f},{100 * t5:.4f},{100 * m:.4f},{total_dropped}")
        lines.append(f"se,{d},{100 * t1se:.4f},{100 * t5se:.4f},{100 * mse_:.4f},0")
    return "\n".join(lines) + "\n"

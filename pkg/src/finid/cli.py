"""Command-line front door: one subcommand per pipeline stage.

synth | train | embed | eval | match | check | serve

Every run is reproducible from argv + config + seeds; every artifact path
is explicit. Failures print one machine-parseable line to stderr:
    finid-error module=<module> kind=<ExceptionClass>: <message>
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from .configfile import load_config
from .errors import CliError, FinidError


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise CliError(f"cli: expected comma-separated integers, got {text!r}") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master seed for this run")
    parser.add_argument("--config", default=None, help="flat key=value config file")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fin manifest")
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--per-id", type=int, default=12)
    p.add_argument("--days", type=int, default=3)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--id-prefix", default="id")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train", help="train an embedding model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--batches", type=int, default=2000)
    p.add_argument("--warm-batches", type=int, default=640)
    p.add_argument("--base-lr", type=float, default=3e-4)
    p.add_argument("--decay-rate", type=float, default=None)
    p.add_argument("--p", type=int, default=21)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--margin", default="soft", help="'soft' or a positive number for hard margin")
    p.add_argument("--reduction", default="sum", choices=("sum", "mean"))
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--head-hidden", type=int, default=1024)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=0, help="print a progress line every N batches")
    _add_common(p)

    p = sub.add_parser("embed", help="embed a manifest into a catalogue store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="open-set retrieval evaluation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--checkpoint", default=None, help="evaluate this model instead of training per fold")
    p.add_argument("--batches", type=int, default=400, help="per-fold training budget without --checkpoint")
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--head-hidden", type=int, default=1024)
    p.add_argument("--embed-dim", type=int, default=128)
    p.add_argument("--distractor-manifest", default=None)
    p.add_argument("--distractors", default="0,150,300,600,900,1200")
    p.add_argument("--ablation", choices=("individuals", "caps"), default=None)
    p.add_argument("--sizes", default="10,25,50")
    p.add_argument("--caps", default="2,4,8,12")
    p.add_argument("--ablation-seeds", default="0,1,2")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    _add_common(p)

    p = sub.add_parser("match", help="match a query image against a store")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", default=None, help="query image file (PNG/PGM)")
    p.add_argument("--query-manifest", default=None)
    p.add_argument("--query-id", default=None)
    p.add_argument("--k", type=int, default=5)
    _add_common(p)

    p = sub.add_parser("check", help="catalogue consistency check")
    p.add_argument("--store", required=True)
    p.add_argument("--intra", type=float, default=None)
    p.add_argument("--inter", type=float, default=None)
    _add_common(p)

    p = sub.add_parser("serve", help="start the match-review service")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pending", required=True, help="manifest of query images awaiting review")
    p.add_argument("--gallery-manifest", default=None, help="manifest backing store exemplar images")
    p.add_argument("--log", required=True, help="decision log path (JSONL, append-only)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--order", choices=("confident", "uncertain"), default="confident")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--ui-dir", default=None, help="serve a built UI from this directory")
    p.add_argument("--announce", action="store_true", help="print 'listening on PORT' once ready")
    _add_common(p)

    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv[1:])
    args = parser.parse_args(argv)
    if known.config:
        overrides = load_config(known.config)
        parser_defaults = vars(parser.parse_args(argv)).copy()
        unknown = [k for k in overrides if k not in parser_defaults]
        if unknown:
            raise CliError(f"cli: config keys not recognised by '{argv[0]}': {sorted(unknown)}")
        # config overrides defaults; explicit CLI flags override config
        explicit = _explicit_dests(parser, argv)
        for key, value in overrides.items():
            if key not in explicit:
                setattr(args, key, value)
    return args


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Dests the user actually passed on the command line."""
    explicit: set[str] = set()
    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    if not sub_actions or not argv:
        return explicit
    subparser = sub_actions[0].choices.get(argv[0])
    if subparser is None:
        return explicit
    by_option = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            by_option[opt] = action.dest
    for token in argv[1:]:
        if token.startswith("--"):
            name = token.split("=", 1)[0]
            if name in by_option:
                explicit.add(by_option[name])
    return explicit


def _model_config(args, init_seed: int):
    from .model import EmbeddingNetConfig

    return EmbeddingNetConfig(
        input_side=args.side,
        input_channels=args.channels,
        head_hidden=args.head_hidden,
        embed_dim=args.embed_dim,
        init_seed=init_seed,
    )


def _load_query_pixels(args, side: int, channels: int) -> np.ndarray:
    from .data import load_manifest, resize
    from .imageops import read_image

    if args.query:
        pixels = read_image(args.query)
    elif args.query_manifest and args.query_id:
        manifest = load_manifest(args.query_manifest)
        matches = [r for r in manifest.records if r.image_id == args.query_id]
        if not matches:
            raise CliError(f"cli: query id {args.query_id!r} not in {args.query_manifest}")
        pixels = matches[0].pixels
    else:
        raise CliError("cli: match needs --query or (--query-manifest and --query-id)")
    if pixels.shape[0] != channels:
        if channels == 1 and pixels.shape[0] == 3:
            pixels = pixels.mean(axis=0, keepdims=True)
        elif channels == 3 and pixels.shape[0] == 1:
            pixels = np.repeat(pixels, 3, axis=0)
    if pixels.shape[1] != side or pixels.shape[2] != side:
        pixels = resize(pixels, side)
    return pixels


def _cmd_synth(args) -> int:
    from .data import save_manifest
    from .synth import synth_generate

    manifest = synth_generate(
        args.ids, args.per_id, args.days, side=args.side, seed=args.seed,
        channels=args.channels, id_prefix=args.id_prefix,
    )
    save_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} records ({args.ids} identities) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    import os

    from .data import load_manifest
    from .trainer import Schedule, TrainRunConfig, train

    manifest = load_manifest(args.manifest)
    if args.margin == "soft":
        soft, margin = True, 0.2
    else:
        try:
            soft, margin = False, float(args.margin)
        except ValueError:
            raise CliError(f"cli: --margin must be 'soft' or a number, got {args.margin!r}") from None
    config = TrainRunConfig(
        model=_model_config(args, init_seed=args.seed),
        schedule=Schedule(
            base_lr=args.base_lr,
            warm_batches=args.warm_batches,
            total_batches=args.batches,
            decay_rate=args.decay_rate,
        ),
        p=args.p,
        k=args.k,
        soft_margin=soft,
        margin=margin,
        loss_reduction=args.reduction,
        augment=not args.no_augment,
        seed_sampler=args.seed + 1,
        seed_augment=args.seed + 2,
        checkpoint_every=args.checkpoint_every,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    trace_path = os.path.join(args.out_dir, "trace.csv")

    progress = None
    if args.log_every > 0:
        def progress(row, every=args.log_every):
            if row.batch % every == 0:
                print(
                    f"batch {row.batch} lr {row.lr:.2e} loss {row.loss:.4f} "
                    f"hp {row.mean_hardest_pos:.3f} hn {row.mean_hardest_neg:.3f}"
                )

    result = train(
        config, manifest, checkpoint_dir=args.out_dir, trace_path=trace_path,
        resume_from=args.resume, progress=progress,
    )
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"trace: {trace_path}")
    return 0


def _cmd_embed(args) -> int:
    from .catalogue import CatalogueStore, store_save
    from .checkpoint import file_sha256
    from .data import load_manifest
    from .evaluation import embed_manifest
    from .trainer import checkpoint_load

    manifest = load_manifest(args.manifest)
    params, _, _, _, _ = checkpoint_load(args.checkpoint)
    fingerprint = file_sha256(args.checkpoint)
    embeddings = embed_manifest(params, manifest)
    store = CatalogueStore(dim=params.config.embed_dim, fingerprint=fingerprint)
    records = manifest.records
    store.add(records, np.stack([embeddings[r.image_id] for r in records]), fingerprint)
    store_save(store, args.out)
    print(f"wrote store with {len(store)} entries (D={store.dim}) to {args.out}")
    return 0


def _train_config_for_eval(args, seed: int):
    from .trainer import Schedule, TrainRunConfig

    return TrainRunConfig(
        model=_model_config(args, init_seed=seed),
        schedule=Schedule(
            total_batches=args.batches,
            warm_batches=max(1, min(640, args.batches // 3)),
        ),
        p=args.p,
        k=args.k,
        seed_sampler=seed + 1,
        seed_augment=seed + 2,
    )


def _cmd_eval(args) -> int:
    from .data import load_manifest
    from .evaluation import (
        ablation_images_per_id,
        ablation_individuals,
        distractor_sweep,
        embed_manifest,
        evaluate_fold,
        make_folds,
        reports_to_csv,
        reports_to_json,
        summarize_ablation,
    )
    from .trainer import checkpoint_load, train

    manifest = load_manifest(args.manifest)
    rng = np.random.default_rng(args.seed)

    if args.ablation:
        folds = make_folds(manifest, args.folds)
        eval_fold = manifest.subset(folds[0].identities)
        train_pool = manifest.subset(
            [i for f in folds[1:] for i in f.identities]
        )
        seeds = _parse_int_list(args.ablation_seeds)
        base = _train_config_for_eval(args, seed=args.seed)
        if args.ablation == "individuals":
            rows = ablation_individuals(train_pool, eval_fold, _parse_int_list(args.sizes), seeds, base)
        else:
            rows = ablation_images_per_id(train_pool, eval_fold, _parse_int_list(args.caps), seeds, base)
        summary = summarize_ablation(rows)
        header = "size,seeds,top1,top1_se,top5,top5_se,map,map_se"
        lines = [header]
        for s in summary:
            lines.append(
                f"{s['size']},{s['seeds']},{100*s['top1']:.4f},{100*s['top1_se']:.4f},"
                f"{100*s['top5']:.4f},{100*s['top5_se']:.4f},{100*s['mean_ap']:.4f},{100*s['mean_ap_se']:.4f}"
            )
        text = "\n".join(lines) + "\n"
        print(text, end="")
        if args.out_csv:
            with open(args.out_csv, "w", encoding="utf-8") as fh:
                fh.write(text)
        return 0

    folds = make_folds(manifest, args.folds)
    counts = _parse_int_list(args.distractors)
    distractor_manifest = None
    if args.distractor_manifest:
        distractor_manifest = load_manifest(args.distractor_manifest)

    if args.checkpoint:
        shared_params, _, _, _, _ = checkpoint_load(args.checkpoint)

    reports = []
    for fold in folds:
        fold_manifest = manifest.subset(fold.identities)
        if args.checkpoint:
            params = shared_params
        else:
            train_ids = [i for f in folds for i in f.identities if f.index != fold.index]
            result = train(_train_config_for_eval(args, seed=args.seed), manifest.subset(train_ids))
            params = result.params
        embeddings = embed_manifest(params, fold_manifest)
        report, cases = evaluate_fold(fold_manifest, embeddings, rng, fold=fold.index)
        if distractor_manifest is not None and counts != [0]:
            demb = embed_manifest(params, distractor_manifest)
            reports.extend(
                distractor_sweep(
                    cases, embeddings, distractor_manifest, demb, counts,
                    np.random.default_rng(args.seed + 7),
                    fold=fold.index, dropped=report.dropped_queries,
                )
            )
        else:
            reports.append(report)

    csv_text = reports_to_csv(reports)
    print(csv_text, end="")
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            fh.write(reports_to_json(reports))
    return 0


def _cmd_match(args) -> int:
    from .catalogue import match, store_load
    from .checkpoint import file_sha256
    from .errors import StoreError
    from .model import embed
    from .trainer import checkpoint_load

    store = store_load(args.store)
    fingerprint = file_sha256(args.checkpoint)
    if fingerprint != store.fingerprint:
        raise StoreError(
            "catalogue: checkpoint fingerprint does not match the store "
            f"({fingerprint[:12]}... vs {store.fingerprint[:12]}...)"
        )
    params, _, _, _, _ = checkpoint_load(args.checkpoint)
    pixels = _load_query_pixels(args, params.config.input_side, params.config.input_channels)
    # eval-mode embedding needs no batch statistics; a single row is fine
    embedding = embed(params, pixels[None], mode="eval").data[0]
    result = match(store, embedding, k_ids=args.k)
    for item in result.items:
        print(f"{item.identity_id} {item.distance:.6f} {','.join(item.image_ids[:3])}")
    return 0


def _cmd_check(args) -> int:
    from .catalogue import consistency_check, store_load

    store = store_load(args.store)
    flags = consistency_check(store, intra_threshold=args.intra, inter_threshold=args.inter)
    for f in flags:
        print(f"{f.kind} {f.image_a} {f.image_b} {f.identity_a} {f.identity_b} {f.distance:.6f}")
    print(f"{len(flags)} flags over {len(store)} entries")
    return 0


def _cmd_serve(args) -> int:
    from .catalogue import store_load
    from .checkpoint import file_sha256
    from .data import load_manifest
    from .errors import StoreError
    from .evaluation import embed_manifest
    from .service import PendingQuery, ReviewService, serve
    from .trainer import checkpoint_load

    store = store_load(args.store)
    fingerprint = file_sha256(args.checkpoint)
    if fingerprint != store.fingerprint:
        raise StoreError(
            "catalogue: checkpoint fingerprint does not match the store "
            f"({fingerprint[:12]}... vs {store.fingerprint[:12]}...)"
        )
    params, _, _, _, _ = checkpoint_load(args.checkpoint)
    pending_manifest = load_manifest(args.pending)
    embeddings = embed_manifest(params, pending_manifest)
    pending = [
        PendingQuery(image_id=r.image_id, embedding=embeddings[r.image_id], date=r.date)
        for r in pending_manifest.records
    ]
    images = {r.image_id: r.pixels for r in pending_manifest.records}
    if args.gallery_manifest:
        gallery = load_manifest(args.gallery_manifest)
        for r in gallery.records:
            images.setdefault(r.image_id, r.pixels)

    service = ReviewService(
        store, pending, args.log, k_candidates=args.k, order=args.order, images=images
    )
    server = serve(service, host=args.host, port=args.port, ui_dir=args.ui_dir)
    actual_port = server.server_address[1]
    if args.announce:
        print(f"listening on {actual_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "embed": _cmd_embed,
    "eval": _cmd_eval,
    "match": _cmd_match,
    "check": _cmd_check,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        args = _apply_config(parser, argv)
        return _COMMANDS[args.command](args)
    except FinidError as exc:
        print(f"finid-error module={exc.module} kind={type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""partforge command line: library build/caption, augment, train, eval,
score, selfcheck.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import kernels, matching
from .augment import CaptionTemplate, generate_stream, load_dataset, write_dataset
from .config import resolve_dataclass, write_run_json
from .encoders import Vocab, encode_shape, encode_text, load_params, tokenize
from .evalharness import (
    RetrievalGround,
    evaluate,
    ndcg_at_k,
    ndcg_at_k_oracle,
    rr_at_k,
    rr_at_k_oracle,
)
from .geometry import load_xyz
from .library import (
    DEFAULT_SCHEMAS,
    build_synthetic_library,
    ingest,
    load_schema,
    save_library,
    save_schema,
)
from .objective import TrainConfig, finite_difference_check, make_batch, train
from .objective import build_vocab as _build_vocab
from .encoders import EncoderConfig, ModelParams


def _load_library_and_schemas(library_dir):
    lib, errors = ingest(library_dir)
    for err in errors:
        print(f"warning: {err}", file=sys.stderr)
    schema_dir = Path(library_dir).parent / "schemas"
    schemas = []
    if schema_dir.is_dir():
        schemas = [load_schema(p) for p in sorted(schema_dir.glob("*.json"))]
    if not schemas:
        schemas = [make() for name, make in sorted(DEFAULT_SCHEMAS.items())
                   if name in lib.taxonomy()]
    if not schemas:
        raise SystemExit("no assembly schema matches the library's categories")
    return lib, schemas


def cmd_library_build(args) -> int:
    lib = build_synthetic_library(seed=args.seed, point_count=args.points)
    out = Path(args.out)
    save_library(lib, out / "library")
    schema_dir = out / "schemas"
    schema_dir.mkdir(parents=True, exist_ok=True)
    for name, make in DEFAULT_SCHEMAS.items():
        save_schema(make(), schema_dir / f"{name}.json")
    write_run_json(out, "library build",
                   {"seed": args.seed, "points": args.points, "records": len(lib)})
    print(f"built synthetic library: {len(lib)} records -> {out}")
    return 0


def cmd_library_caption(args) -> int:
    from .captioner import EndpointConfig, caption_library

    lib, _ = ingest(args.library)
    endpoint = EndpointConfig(url=args.endpoint, model=args.model,
                              max_retries=args.max_retries,
                              backoff_base=args.backoff)
    errors = caption_library(lib, endpoint, args.library, concurrency=args.concurrency)
    for err in errors:
        print(f"error: {err}", file=sys.stderr)
    print(f"captioned library at {args.library}; {len(errors)} failures")
    return 1 if errors else 0


def cmd_augment(args) -> int:
    lib, schemas = _load_library_and_schemas(args.library)
    if args.schema:
        schemas = [load_schema(args.schema)]
    tmpl = CaptionTemplate()
    pairs = []
    for k, schema in enumerate(schemas):
        n = args.count // len(schemas) + (1 if k < args.count % len(schemas) else 0)
        if n:
            pairs.extend(
                generate_stream(lib, schema, tmpl, n, args.seed + k,
                                n_points=args.points, theta=args.theta,
                                inter=not args.no_inter, intra=not args.no_intra)
            )
    write_dataset(pairs, args.out)
    write_run_json(args.out, "augment", {
        "library": args.library, "schema": args.schema, "count": args.count,
        "seed": args.seed, "points": args.points, "theta": args.theta,
        "inter": not args.no_inter, "intra": not args.no_intra,
    })
    print(f"wrote {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_train(args) -> int:
    flag_values = {}
    for kv in args.set or []:
        key, _, value = kv.partition("=")
        if not value:
            raise SystemExit(f"--set expects key=value, got {kv!r}")
        flag_values[key] = value
    cfg = resolve_dataclass(TrainConfig, file_path=args.config)
    # re-coerce string flag overrides against the resolved config
    for key, value in flag_values.items():
        current = getattr(cfg, key)
        typ = type(current)
        cfg = dataclasses.replace(
            cfg, **{key: value.lower() in ("1", "true", "yes", "on")
                    if typ is bool else typ(value)}
        )
    if args.library:
        lib, schemas = _load_library_and_schemas(args.library)
    else:
        lib = build_synthetic_library(seed=cfg.seed)
        schemas = [make() for make in DEFAULT_SCHEMAS.values()]
    result = train(cfg, lib, schemas, CaptionTemplate(), out_dir=args.out)
    write_run_json(args.out, "train", dataclasses.asdict(cfg))
    status = "aborted (non-finite loss)" if result.aborted else "done"
    final = result.loss_curve[-1]["total"] if result.loss_curve else float("nan")
    print(f"training {status}; final loss {final:.4f}; checkpoint in {args.out}")
    return 1 if result.aborted else 0


def _load_model(ckpt_path, vocab_path=None):
    params, meta = load_params(ckpt_path)
    # optimizer tensors may be present in training checkpoints
    params.tensors = {n: a for n, a in params.tensors.items() if not n.startswith("opt.")}
    vocab_file = Path(vocab_path) if vocab_path else Path(ckpt_path).parent / "vocab.txt"
    if not vocab_file.exists():
        raise SystemExit(f"vocab file not found: {vocab_file}")
    return params, Vocab.load(vocab_file), meta


def cmd_eval(args) -> int:
    params, vocab, _ = _load_model(args.ckpt, args.vocab)
    pairs = load_dataset(args.gallery)
    s2t, t2s = evaluate(params, vocab, pairs, RetrievalGround.one_to_one(len(pairs)),
                        checkpoint_id=str(args.ckpt))
    report = {"S2T": s2t.as_dict(), "T2S": t2s.as_dict()}
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report, indent=2))
    return 0


def cmd_score(args) -> int:
    params, vocab, _ = _load_model(args.ckpt, args.vocab)
    cloud = load_xyz(args.shape)
    out, _ = encode_shape(cloud.points, cloud.labels, params)
    w, _ = encode_text(tokenize(args.text, vocab), params)
    value = matching.pair_similarity(out["part_features"], w)
    print(f"{value:.6f}")
    return 0


def cmd_selfcheck(args) -> int:
    ok = True
    rng = np.random.default_rng(0)

    # Sinkhorn vs exact optimum by permutation enumeration
    worst = 0.0
    for _ in range(20):
        c = rng.uniform(0, 2, size=(3, 3))
        plan = matching.sinkhorn(c, *matching.uniform_marginals(3, 3),
                                 epsilon=1e-3, max_iter=5000, tol=1e-9)
        approx = matching.emd_similarity(c, plan.plan)
        worst = max(worst, abs(approx - matching.exact_uniform_similarity(c)))
    passed = worst < 1e-2
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} sinkhorn-oracle (max |delta| {worst:.2e}, "
          f"backend {kernels.BACKEND})")

    # gradient audit on a tiny synthetic batch
    lib = build_synthetic_library(seed=1, point_count=64)
    schemas = [make() for make in DEFAULT_SCHEMAS.values()]
    tmpl = CaptionTemplate()
    cfg = TrainConfig(batch_size=2, dim=8, pp_hidden=8, embed_dim=8,
                      n_points=24, sinkhorn_max_iter=40)
    vocab = _build_vocab(lib, schemas, tmpl)
    enc_cfg = EncoderConfig(dim=8, pp_hidden=8, embed_dim=8,
                            vocab_size=len(vocab), n_classes=5)
    params = ModelParams.init(enc_cfg, np.random.default_rng(3))
    batch = make_batch(lib, schemas, tmpl, vocab, cfg, seed_base=11, size=2)
    report = finite_difference_check(params, batch, cfg, n_coords=60)
    passed = report["max_rel_err"] < 1e-4
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} gradient-check "
          f"(max rel err {report['max_rel_err']:.2e})")

    # ranking metrics vs brute-force oracle
    passed = True
    for _ in range(20):
        scores = rng.normal(size=(6, 8))
        ground = [{int(rng.integers(8))} for _ in range(6)]
        for k in (1, 5):
            if rr_at_k(scores, ground, k) != rr_at_k_oracle(scores, ground, k):
                passed = False
        if abs(ndcg_at_k(scores, ground, 5) - ndcg_at_k_oracle(scores, ground, 5)) > 1e-9:
            passed = False
    ok &= passed
    print(f"{'PASS' if passed else 'FAIL'} metric-oracle")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partforge")
    parser.add_argument("--threads", type=int, default=0,
                        help="global cap on worker threads (0: default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_lib = sub.add_parser("library", help="library management")
    lib_sub = p_lib.add_subparsers(dest="library_command", required=True)
    p_build = lib_sub.add_parser("build", help="build the synthetic desk-scale library")
    p_build.add_argument("--out", required=True)
    p_build.add_argument("--seed", type=int, default=0)
    p_build.add_argument("--points", type=int, default=512)
    p_build.set_defaults(func=cmd_library_build)
    p_cap = lib_sub.add_parser("caption", help="caption parts via an MLLM endpoint")
    p_cap.add_argument("--library", required=True)
    p_cap.add_argument("--endpoint", required=True)
    p_cap.add_argument("--model", default="llava")
    p_cap.add_argument("--concurrency", type=int, default=2)
    p_cap.add_argument("--max-retries", type=int, default=3)
    p_cap.add_argument("--backoff", type=float, default=1.0)
    p_cap.set_defaults(func=cmd_library_caption)

    p_aug = sub.add_parser("augment", help="generate shape/caption pairs")
    p_aug.add_argument("--library", required=True)
    p_aug.add_argument("--schema", default=None)
    p_aug.add_argument("--count", type=int, required=True)
    p_aug.add_argument("--seed", type=int, default=0)
    p_aug.add_argument("--out", required=True)
    p_aug.add_argument("--points", type=int, default=256)
    p_aug.add_argument("--theta", type=float, default=0.95)
    p_aug.add_argument("--no-inter", action="store_true")
    p_aug.add_argument("--no-intra", action="store_true")
    p_aug.set_defaults(func=cmd_augment)

    p_train = sub.add_parser("train", help="train the retrieval model")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--library", default=None)
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="retrieval metrics over a gallery")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--gallery", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--vocab", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_score = sub.add_parser("score", help="similarity of one shape/text pair")
    p_score.add_argument("--shape", required=True)
    p_score.add_argument("--text", required=True)
    p_score.add_argument("--ckpt", required=True)
    p_score.add_argument("--vocab", default=None)
    p_score.set_defaults(func=cmd_score)

    p_check = sub.add_parser("selfcheck", help="run the built-in oracles")
    p_check.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        import os

        os.environ["PARTFORGE_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:  # single-line cause, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

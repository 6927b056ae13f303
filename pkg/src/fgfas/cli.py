"""``fas`` command line.

Exit codes: 0 on success, 2 on invalid input (bad arguments, malformed or
missing files, integrity failures), 3 on runtime or backend errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .core import FASError, FormatError, IntegrityError, ValidationError

log = logging.getLogger("fgfas")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def cmd_synth(args) -> None:
    from .pipeline.synth import generate_synthetic

    manifest = generate_synthetic(args.count, args.out, seed=args.seed, size=args.size)
    print(f"wrote {len(manifest.entries)} samples to {Path(args.out) / 'manifest.jsonl'}")


def cmd_annotate(args) -> None:
    from .annotator import LabelingPolicy
    from .pipeline.annotate import annotate_manifest
    from .segmenter import backend_from_env

    policy = LabelingPolicy.load(args.policy) if args.policy else LabelingPolicy()
    path = annotate_manifest(args.manifest, args.out, policy, backend_from_env(args.segmenter), workers=args.workers)
    print(f"annotated manifest: {path}")


def cmd_augment(args) -> None:
    from PIL import Image

    from .annotator import write_map
    from .core import ThreeChannelMap
    from .mcrea import AugmentConfig, Batch, BatchItem, mcrea_augment
    from .pipeline.training import load_corpus

    corpus = load_corpus(args.manifest)
    cfg = AugmentConfig(gamma=args.gamma, rho=args.rho, scheme=args.scheme, seed=args.seed, alpha=args.alpha)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    draw_log = []
    for b, lo in enumerate(range(0, len(corpus), args.batch_size)):
        idx = range(lo, min(lo + args.batch_size, len(corpus)))
        batch = Batch(
            [BatchItem(corpus.images[k].copy(), ThreeChannelMap.from_stack(corpus.labels[k].copy()), corpus.landmarks[k].copy()) for k in idx]
        )
        aug = mcrea_augment(batch, dataclasses.replace(cfg, seed=cfg.seed + b))
        for k, item in zip(idx, aug.samples):
            sid = corpus.entries[k].id
            Image.fromarray(item.image).save(out / "images" / f"{sid}.png")
            write_map(item.label, out / "labels" / f"{sid}.fga1")
        draw_log.append({"batch": b, "ids": [corpus.entries[k].id for k in idx], "draws": aug.draw_log})
    (out / "draw_log.json").write_text(json.dumps(draw_log, indent=2))
    modified = sum(1 for d in draw_log for r in d["draws"] if not r["skipped"])
    print(f"augmented {len(corpus)} samples in {len(draw_log)} batches ({modified} exchanges); log: {out / 'draw_log.json'}")


def cmd_train(args) -> None:
    from .pipeline.training import TrainConfig, train, train_loo

    cfg = TrainConfig.load(args.config)
    if args.out:
        cfg.out = args.out
    if args.epochs:
        cfg.epochs = args.epochs
    if cfg.loo:
        logs = train_loo(cfg)
        print(f"trained {len(logs)} leave-one-out folds under {cfg.out}")
    else:
        result = train(cfg)
        last = result["epochs"][-1]
        print(f"epoch {last['epoch']} loss {last['loss']:.5f}; checkpoint {result['checkpoint']}")


def cmd_eval(args) -> None:
    from .decision import DecisionConfig
    from .pipeline.training import evaluate

    report, rows = evaluate(
        args.checkpoint,
        args.manifest,
        args.protocol,
        dev_manifest=args.dev_manifest,
        decision=DecisionConfig(epsilon=args.epsilon),
        target_bpcer=args.target_bpcer,
    )
    body = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(body)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.scores:
        Path(args.scores).write_text("".join(json.dumps(r) + "\n" for r in rows))
    print(body)


def cmd_decide(args) -> None:
    from .annotator import read_map
    from .core import LandmarkSet
    from .decision import DecisionConfig, decide

    pred = read_map(args.pred)
    lm_path = Path(args.landmarks)
    if not lm_path.is_file():
        raise ValidationError(f"landmark file not found: {lm_path}")
    landmarks = LandmarkSet.from_json(json.loads(lm_path.read_text()))
    print(json.dumps(decide(pred, landmarks, DecisionConfig(epsilon=args.epsilon))))


def cmd_preview(args) -> None:
    from .annotator import export_preview, read_map

    export_preview(read_map(args.map), args.out)
    print(f"wrote {args.out}")


def cmd_serve(args) -> None:
    import uvicorn

    uvicorn.run("fgfas.service:app", host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fas", description="Fine-grained face anti-spoofing toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic corpus")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("annotate", help="build cached three-channel labels")
    s.add_argument("--manifest", required=True)
    s.add_argument("--policy")
    s.add_argument("--out", required=True)
    s.add_argument("--segmenter", choices=["mock", "service"])
    s.add_argument("--workers", type=int, default=4)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("augment", help="apply region exchange to an annotated manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--gamma", type=float, default=0.5)
    s.add_argument("--rho", type=int, default=1)
    s.add_argument("--scheme", default="overlay", choices=["overlay", "integrated_attack", "clipping_exchange"])
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--out", default="augmented")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--protocol", choices=["intra", "cross", "loo"], default="intra")
    s.add_argument("--dev-manifest")
    s.add_argument("--epsilon", type=float, default=0.0)
    s.add_argument("--target-bpcer", type=float, default=1.0)
    s.add_argument("--out")
    s.add_argument("--csv")
    s.add_argument("--scores", help="write per-sample scores as JSON lines")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decide", help="score one predicted map")
    s.add_argument("--pred", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--epsilon", type=float, default=0.0)
    s.set_defaults(func=cmd_decide)

    s = sub.add_parser("preview", help="render a map as RGB")
    s.add_argument("--map", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preview)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, FormatError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FASError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

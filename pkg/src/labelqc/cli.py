"""Command-line entry point: ``labelqc <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import resource
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("labelqc")


def _read_config(path):
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
        return len(text)
    Path(path).write_text(text)
    return len(text.encode())


def cmd_synth(args, cfg):
    from .oracle import GeneratorConfig, build_corpus

    gen = GeneratorConfig.from_json(cfg) if cfg else GeneratorConfig()
    if args.volumes is not None:
        gen.n_volumes = args.volumes
    manifest = build_corpus(gen, args.seed, args.out)
    log.info("wrote %d records to %s", len(manifest.records), args.out)
    return 0


def _vocab_from(path):
    from .core import ClassVocabulary
    from .oracle import CorpusManifest

    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    d = json.loads(p.read_text())
    if isinstance(d, dict) and "vocabulary" in d:
        return CorpusManifest.load(p).vocab()
    if isinstance(d, list) and d and isinstance(d[0], str):
        return ClassVocabulary.from_names(d)
    return ClassVocabulary.from_json(d)


def cmd_embed(args, cfg):
    from .conditioning import embed_classes

    vocab = _vocab_from(args.vocab)
    table = embed_classes(vocab, args.provider, args.template, args.file, args.d_t, args.seed)
    table.save(args.out)
    log.info("wrote %s table (%d classes, d_t=%d) to %s", args.provider, vocab.size, table.d_t, args.out)
    return 0


def cmd_train(args, cfg):
    from .conditioning import EmbeddingTable
    from .loss import LossConfig
    from .oracle import CorpusManifest
    from .regressor import save_checkpoint, train

    root = Path(args.corpus)
    manifest = CorpusManifest.load(root / "manifest.json" if root.is_dir() else root)
    table = EmbeddingTable.load(args.embeddings)
    params = dict(cfg.get("model", {}))
    params["seed"] = args.seed
    if args.epochs is not None:
        params["epochs"] = args.epochs
    loss = LossConfig(**cfg.get("loss", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = train(manifest, table, params, loss, per_record=cfg.get("slices_per_record", 3),
                  checkpoint_dir=out / "epochs", log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "model.npz")
    log.info("trained %d steps; checkpoint at %s", len(model.loss_log_), out / "model.npz")
    return 0


def cmd_estimate(args, cfg):
    from .core import load_mask, load_volume
    from .oracle import CorpusManifest
    from .regressor import estimate_manifest, estimate_volume, load_checkpoint, write_records

    model = load_checkpoint(args.checkpoint)
    if args.manifest:
        p = Path(args.manifest)
        manifest = CorpusManifest.load(p / "manifest.json" if p.is_dir() else p)
        split = None if args.split == "all" else args.split
        records = estimate_manifest(model, manifest, split, args.k)
    else:
        if not (args.image and args.mask and args.class_id):
            raise SystemExit("estimate needs --manifest or --image/--mask/--class-id")
        image = load_volume(args.image)
        mask = load_mask(args.mask)
        if args.mask_is_binary:
            mask.data = (mask.data > 0).astype(np.uint8) * args.class_id
        records = [estimate_volume(model, image, mask, args.class_id, args.k)]
    write_records(records, args.out)
    log.info("wrote %d quality records to %s", len(records), args.out)
    return 0


def cmd_eval(args, cfg):
    from .evaluation import eval_suite, write_scatter_csv
    from .regressor import read_records

    records = read_records(args.records)
    ks = tuple(int(k) for k in args.ks.split(","))
    report = eval_suite(records, ks)
    _write_json(report.to_json(), args.out)
    if args.scatter:
        write_scatter_csv(records, args.scatter)
    return 0


def _subjects(path):
    from .core import SubjectMeta
    from .oracle import CorpusManifest

    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    d = json.loads(p.read_text())
    if isinstance(d, dict) and "records" in d:
        return list(CorpusManifest.load(p).subjects().values())
    return [SubjectMeta.from_json(row) for row in d]


def cmd_report(args, cfg):
    import csv

    from .qc import dataset_report
    from .regressor import read_records

    records = read_records(args.records)
    meta = _subjects(args.meta) if args.meta else None
    report = dataset_report(records, meta, args.threshold)
    _write_json(report.to_json(), args.out)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "n", "mean_predicted_dsc"])
            for cid, mean in report.organ_means.items():
                w.writerow([cid, report.organ_counts[cid], mean])
    return 0


def _prob_scores(paths, method, mode):
    from .core import load_volume
    from .qc import entropy_score, mc_dropout_score

    grouped = {}
    for p in paths:
        v = load_volume(p)
        grouped.setdefault(v.id or Path(p).stem, []).append(v.data)
    if method == "entropy":
        return [entropy_score(arrs[0], mode, vid) for vid, arrs in sorted(grouped.items())]
    return [mc_dropout_score(arrs, vid) for vid, arrs in sorted(grouped.items())]


def cmd_select(args, cfg):
    from .qc import quality_scores, random_scores, select_for_annotation, select_pseudo_labels
    from .regressor import read_records

    t0 = time.perf_counter()
    bytes_read = 0
    if args.method == "quality":
        bytes_read = Path(args.records).stat().st_size
        scores = quality_scores(read_records(args.records))
    elif args.method == "random":
        ids = [r.volume_id for r in read_records(args.records)] if args.records else list(args.ids)
        scores = random_scores(ids, args.seed)
    else:
        bytes_read = sum(Path(p).stat().st_size for p in args.prob)
        scores = _prob_scores(args.prob, args.method, args.entropy_mode)
    pick = select_for_annotation if args.mode == "annotate" else select_pseudo_labels
    selected = pick(scores, args.n)
    elapsed = time.perf_counter() - t0
    out = {
        "method": args.method,
        "mode": args.mode,
        "n": args.n,
        "selected": selected,
        "resources": {
            "seconds": elapsed,
            "peak_rss_mb": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0,
            "bytes_read": bytes_read,
        },
    }
    text = json.dumps(out, indent=1, sort_keys=True)
    out["resources"]["bytes_written"] = len(text.encode())
    _write_json(out, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelqc", description="segmentation label quality control")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", help="JSON config file for the subcommand")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic degraded corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--volumes", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="build or validate a class embedding table")
    p.add_argument("--vocab", required=True, help="corpus dir/manifest, or JSON list of class names")
    p.add_argument("--provider", default="one_hot", choices=["one_hot", "precomputed_file", "hash_fallback"])
    p.add_argument("--template", default="[CLS]")
    p.add_argument("--file", help="precomputed prompt-vector file")
    p.add_argument("--d-t", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", help="train a quality regressor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="predict DSC for volumes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--mask-is-binary", action="store_true")
    p.add_argument("--class-id", type=int)
    p.add_argument("-k", type=int, default=10, help="slices per volume")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval-metrics", help="LCC / SROCC / MAP@k over quality records")
    p.add_argument("--records", required=True)
    p.add_argument("--ks", default="5,10")
    p.add_argument("--out", default="-")
    p.add_argument("--scatter")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="dataset quality report with bias tests")
    p.add_argument("--records", required=True)
    p.add_argument("--meta", help="corpus manifest or JSON list of subject metadata")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", default="-")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("select", help="pick volumes for annotation or as pseudo labels")
    p.add_argument("--method", required=True, choices=["quality", "entropy", "mc_dropout", "random"])
    p.add_argument("--mode", default="annotate", choices=["annotate", "pseudo"])
    p.add_argument("-n", type=int, required=True, help="budget (annotate) or k (pseudo)")
    p.add_argument("--records", help="quality records (quality/random)")
    p.add_argument("--prob", nargs="*", default=[], help="probability volumes (entropy/mc_dropout)")
    p.add_argument("--ids", nargs="*", default=[], help="volume ids (random)")
    p.add_argument("--entropy-mode", default="mean", choices=["mean", "sum"])
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    return args.func(args, _read_config(args.config))


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: gen, mutate, preprocess, featurize, train, eval.

Exit codes: 0 success, 1 usage error, 2 data or IO error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import AttackPlan, DonorPool, MutationRecipe, compose, harvest_donors
from .corpus_gen import CorpusConfig, Manifest, ManifestRow, generate_corpus, sha256
from .errors import RobustPeError
from .features import feature_rows, monotone_features, section_features, write_feature_rows
from .metrics import evaluate_binary, evaluate_multiclass, f1_score, reports_json, reports_table, roc_auc
from .pe_format import parse_pe, serialize_pe
from .pipeline import PipelineConfig, RobustDetector, load_clean
from .preprocess import PASS_ORDER, apply_passes

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
log = logging.getLogger("robustpe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _file_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _write_outputs(out_dir: Path, manifest: Manifest, rows: list[ManifestRow], blobs: list[bytes]) -> Manifest:
    out = Manifest([], out_dir)
    for row, data in zip(rows, blobs):
        target = out_dir / row.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
        out.rows.append(replace(row, sha256=sha256(data)))
    out.write(out_dir / "manifest.csv")
    return out


def cmd_gen(args) -> int:
    config_path = Path(args.config)
    if not config_path.is_file():
        raise UsageError(f"config file {config_path} not found")
    config = CorpusConfig.load(config_path)
    if args.seed is not None:
        config.seed = args.seed
    manifest = generate_corpus(config, args.out)
    log.info("wrote %d files and %s", len(manifest.rows), Path(args.out) / "manifest.csv")
    return EXIT_OK


def _recipes(args, index: int) -> list[MutationRecipe]:
    seed = _file_seed(args.seed, index)
    out = [replace(r, seed=seed) for r in args.recipe_list]
    if args.header_strip:
        out.append(MutationRecipe("header_strip", seed))
    if args.intersect:
        out.append(MutationRecipe("intersect", seed))
    if args.pad:
        out.append(MutationRecipe("pad", seed, pad_bytes=args.pad, pad_source=args.pad_source))
    if args.inject_sections:
        out.append(
            MutationRecipe("inject", seed, target_section_count=args.inject_sections, grow_headers=args.grow_headers)
        )
    return out


def _donor_pool(args, manifest: Manifest) -> DonorPool:
    source = Manifest.load(args.donors) if args.donors else manifest
    if args.donor_family:
        rows = [r for r in source.rows if r.family == args.donor_family]
    else:
        rows = [r for r in source.rows if r.label == "benign"]
    if args.donor_max_epoch is not None:
        rows = [r for r in rows if r.epoch <= args.donor_max_epoch]
    return harvest_donors([source.read(r) for r in rows], [r.path for r in rows])


def cmd_mutate(args) -> int:
    args.recipe_list = []
    if args.recipes:
        path = Path(args.recipes)
        if not path.is_file():
            raise UsageError(f"recipe file {path} not found")
        args.recipe_list = [MutationRecipe.from_dict(d) for d in json.loads(path.read_text())]
    if not (args.recipe_list or args.header_strip or args.intersect or args.pad or args.inject_sections):
        raise UsageError("choose at least one attack: --header-strip, --intersect, --pad N, --inject-sections K")
    if args.pad is not None and args.pad <= 0:
        raise UsageError("--pad needs a positive byte count")
    manifest = Manifest.load(args.manifest)
    needs_pool = args.inject_sections or (args.pad and args.pad_source == "benign") or any(
        r.kind == "inject" or (r.kind == "pad" and r.pad_source == "benign") for r in args.recipe_list
    )
    pool = _donor_pool(args, manifest) if needs_pool else DonorPool()
    out_dir = Path(args.out)
    rows, blobs, recipes_log, failed = [], [], {}, 0
    for i, row in enumerate(manifest.rows):
        data = manifest.read(row)
        targeted = row.family == args.only_family if args.only_family else row.label != "benign"
        if targeted:
            recipes = _recipes(args, i)
            try:
                pe, _ = parse_pe(data)
                data = serialize_pe(compose(pe, recipes, pool))
            except RobustPeError as exc:
                log.error("%s: %s", row.path, exc)
                failed += 1
                continue
            row = replace(row, mutation=AttackPlan(tuple(recipes)).tag())
            recipes_log[row.path] = [r.to_dict() for r in recipes]
        rows.append(row)
        blobs.append(data)
    _write_outputs(out_dir, manifest, rows, blobs)
    (out_dir / "recipes.json").write_text(json.dumps(recipes_log, indent=1, sort_keys=True))
    log.info("mutated %d of %d files (%d failed)", len(recipes_log), len(manifest.rows), failed)
    return EXIT_DATA if failed else EXIT_OK


def cmd_preprocess(args) -> int:
    passes = [p for p in PASS_ORDER if getattr(args, p)]
    manifest = Manifest.load(args.manifest)
    rows, blobs, failed = [], [], 0
    for row in manifest.rows:
        data = manifest.read(row)
        if passes:
            try:
                data = serialize_pe(apply_passes(parse_pe(data)[0], passes))
            except RobustPeError as exc:
                log.error("%s: %s", row.path, exc)
                failed += 1
                continue
        rows.append(row)
        blobs.append(data)
    _write_outputs(Path(args.out), manifest, rows, blobs)
    log.info("preprocessed %d files with passes %s", len(rows), ",".join(passes) or "none")
    return EXIT_DATA if failed else EXIT_OK


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    return PipelineConfig.from_dict(json.loads(p.read_text()))


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if args.task:
        config = replace(config, task=args.task)
    if args.workers:
        config = replace(config, workers=args.workers)
    manifest = Manifest.load(args.manifest)
    rows = [r for r in manifest.rows if r.epoch <= config.train_max_epoch]
    files = [manifest.read(r) for r in rows]
    targets = [r.label if config.task == "detection" else r.target for r in rows]
    det = RobustDetector.fit(files, targets, config)
    meta = det.save(args.out)
    if config.task == "detection":
        y = np.array([t != "benign" for t in targets])
        log.info("train AUC %.4f on %d files", roc_auc(det.score(files), y), len(files))
    else:
        log.info("train macro F1 %.4f on %d files", f1_score(det.predict(files), targets).macro, len(files))
    log.info("bundle %s (vocab %s)", args.out, meta["vocab_fingerprint"][:12])
    return EXIT_OK


def cmd_featurize(args) -> int:
    det = RobustDetector.load(args.bundle)
    manifest = Manifest.load(args.manifest)
    rows = []
    for r in manifest.rows:
        pe = load_clean(manifest.read(r))
        rows += feature_rows(r.path, section_features(pe, det.vocab), monotone_features(pe, det.vocab))
    write_feature_rows(args.out, rows)
    log.info("wrote %d sparse rows for %d files", len(rows), len(manifest.rows))
    return EXIT_OK


def cmd_eval(args) -> int:
    det = RobustDetector.load(args.bundle)
    min_epoch = args.min_epoch if args.min_epoch is not None else det.config.train_max_epoch + 1
    reports = []
    for path in args.manifest:
        manifest = Manifest.load(path)
        rows = [r for r in manifest.rows if r.epoch >= min_epoch]
        tags = sorted({r.mutation for r in rows if r.mutation})
        setting = "+".join(tags) if tags else "clean"
        files = [manifest.read(r) for r in rows]
        if det.task == "detection":
            y = np.array([r.label != "benign" for r in rows])
            reports.append(evaluate_binary(setting, det.score(files), y))
        else:
            reports.append(evaluate_multiclass(setting, det.predict(files), [r.target for r in rows], det.classes))
    report_path = Path(args.report)
    report_path.write_text(reports_json(reports))
    print(reports_table(reports))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustpe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", required=True, help="corpus config JSON")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    m = sub.add_parser("mutate", help="apply attacks to the malicious files of a manifest")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--header-strip", action="store_true")
    m.add_argument("--intersect", action="store_true")
    m.add_argument("--pad", type=int, metavar="N")
    m.add_argument("--pad-source", choices=["benign", "random", "constant"], default="benign")
    m.add_argument("--inject-sections", type=int, metavar="K", help="target section count")
    m.add_argument("--grow-headers", action="store_true")
    m.add_argument("--recipes", help="JSON list of recipes; flags add to it, seeds are derived per file")
    m.add_argument("--donors", help="manifest supplying donor files (default: the input manifest)")
    m.add_argument("--donor-family", help="harvest donors from this family instead of benign files")
    m.add_argument("--donor-max-epoch", type=int, help="only harvest donors up to this epoch")
    m.add_argument("--only-family", help="mutate only files of this family")
    m.set_defaults(func=cmd_mutate)

    pp = sub.add_parser("preprocess", help="run preprocessing passes")
    pp.add_argument("--manifest", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--ss", action="store_true", help="software stripping")
    pp.add_argument("--pr", action="store_true", help="padding removal")
    pp.add_argument("--br", action="store_true", help="slack byte reset")
    pp.set_defaults(func=cmd_preprocess)

    f = sub.add_parser("featurize", help="write sparse feature rows using a bundle's vocabulary")
    f.add_argument("--manifest", required=True)
    f.add_argument("--bundle", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_featurize)

    t = sub.add_parser("train", help="train a detector bundle")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--task", choices=["detection", "family"])
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a bundle on one or more manifests")
    e.add_argument("--manifest", required=True, action="append")
    e.add_argument("--bundle", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--min-epoch", type=int, help="evaluate rows from this epoch on (default: after training range)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
    except UsageError as exc:
        print(f"robustpe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"robustpe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RobustPeError, OSError, ValueError, KeyError) as exc:
        print(f"robustpe: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - last resort
        log.exception("internal error")
        print(f"robustpe: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``python -m xattn <command> ...``.

Every command accepts ``--config FILE`` (flat ``key = value`` lines, keys
named like the long flags with dashes or underscores) and ``--seed``.
Explicit flags override config values; ``XATTN_SEED`` is the seed fallback.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DataError, IoFailure, NumericError, XattnError

log = logging.getLogger("xattn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ config

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv: list[str]):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    cfg = read_config(args.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "command")}
    defaults = {}
    for key, value in cfg.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key '{key}' for '{args.command}'")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except (TypeError, ValueError):
                raise UsageError(f"config key '{key}': bad value {value!r}") from None
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"config key '{key}': {value!r} not in {sorted(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def resolve_seed(seed: int | None, default: int = 0) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("XATTN_SEED")
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"XATTN_SEED must be an integer, got {env!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


# ---------------------------------------------------------------- commands

def cmd_extract(args) -> int:
    from .io import atomic_write_text
    from .text import DISEASE_TERMS, extract_attributes, load_vocabulary, read_reports

    vocab = load_vocabulary()
    terms = DISEASE_TERMS if not args.disease_terms else frozenset(args.disease_terms.split(","))
    lines = []
    for rep in read_reports(args.reports):
        attrs = extract_attributes(rep, vocab, terms)
        lines.append(json.dumps({"id": rep.id, "attributes": attrs.words(vocab), "indices": attrs.indices()}))
    atomic_write_text(args.out, "\n".join(lines) + ("\n" if lines else ""))
    log.info("wrote %d attribute records to %s", len(lines), args.out)
    return EXIT_OK


def _read_corpus(path: str) -> list[str]:
    from .text import read_reports

    if path.endswith(".jsonl"):
        return [r.text for r in read_reports(path)]
    text = Path(path).read_text(encoding="utf-8")
    return [block for block in text.split("\n\n") if block.strip()]


def cmd_embed(args) -> int:
    from .data import synth_corpus
    from .embeddings import SkipGramConfig, train_embeddings
    from .text import tokenize

    seed = resolve_seed(args.seed)
    if args.corpus:
        texts = _read_corpus(args.corpus)
    elif args.synthetic:
        texts = synth_corpus(args.synthetic, seed)
    else:
        raise UsageError("embed: one of --corpus or --synthetic is required")
    cfg = SkipGramConfig(dim=args.dim, window=args.window, negatives_per_target=args.negatives,
                         epochs=args.epochs, learning_rate=args.lr, subsample_threshold=args.subsample,
                         seed=seed)
    table = train_embeddings([tokenize(t) for t in texts], cfg)
    table.save(args.out)
    log.info("wrote %d x %d embeddings to %s", len(table), table.dim, args.out)
    return EXIT_OK


def _synthetic_severity(attr_words: list[str], rng) -> float:
    # stronger attributes map to a higher range on the 0-8 scale
    if "severe" in attr_words:
        lo, hi = 5.0, 8.0
    elif "moderate" in attr_words or "diffuse" in attr_words:
        lo, hi = 3.0, 6.0
    else:
        lo, hi = 0.0, 4.0
    return float(round(rng.uniform(lo, hi), 2))


def cmd_synth(args) -> int:
    from .data import SynthConfig, render_report, synth_corpus, synth_generate, write_annotations, \
        write_rois_bundle, write_rois_jsonl
    from .embeddings import EmbeddingTable, SkipGramConfig, train_embeddings
    from .text import Report, load_vocabulary, tokenize, write_reports

    seed = resolve_seed(args.seed, default=7)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.embeddings:
        table = EmbeddingTable.load(args.embeddings)
    else:
        corpus = [tokenize(t) for t in synth_corpus(args.corpus_reports, seed)]
        table = train_embeddings(corpus, SkipGramConfig(dim=args.dim, epochs=args.embed_epochs, seed=seed))
    table.save(out / "embeddings.txt")
    cfg = SynthConfig(num_images=args.num_images, rois_per_image=args.rois, feat_dim=args.feat_dim,
                      attrs_per_image=args.attrs, noise_sigma=args.sigma, seed=seed)
    samples, planted = synth_generate(cfg, table)
    vocab = load_vocabulary()
    rng = np.random.default_rng([seed, 3])
    reports = []
    for s in samples:
        words = s.attrs.words(vocab)
        reports.append(Report(s.image_id, render_report(words), _synthetic_severity(words, rng)))
    write_reports(out / "reports.jsonl", reports)
    roi_sets = [s.roi_set for s in samples]
    if args.format == "bin":
        write_rois_bundle(out / "rois.bin", roi_sets)
    else:
        write_rois_jsonl(out / "rois.jsonl", roi_sets)
    write_annotations(out / "annotations.jsonl", {k: [v.box] for k, v in planted.items()})
    (out / "planted.json").write_text(json.dumps({k: v.roi_index for k, v in planted.items()}, indent=0))
    log.info("wrote %d synthetic images to %s", len(samples), out)
    return EXIT_OK


def _data_paths(args) -> tuple[Path, Path, Path]:
    base = Path(args.data) if args.data else None

    def pick(explicit, *names):
        if explicit:
            return Path(explicit)
        if base is None:
            raise UsageError(f"--{names[0].split('.')[0]} or --data is required")
        for name in names:
            if (base / name).exists():
                return base / name
        raise IoFailure(f"{base} has none of {', '.join(names)}")

    return (pick(args.reports, "reports.jsonl"), pick(args.rois, "rois.jsonl", "rois.bin"),
            pick(args.embeddings, "embeddings.txt"))


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .embeddings import EmbeddingTable
    from .errors import EmptyDataset
    from .model import ModelConfig, init_params
    from .trainer import EarlyStop, TrainConfig, train, write_trace

    seed = resolve_seed(args.seed)
    reports, rois, emb = _data_paths(args)
    table = EmbeddingTable.load(emb)
    ds = load_dataset(reports, rois, table)
    if not ds.samples:
        raise EmptyDataset("no images with extracted attributes")
    mcfg = ModelConfig(roi_dim=ds.samples[0].roi_set.roi_dim, dim=table.dim,
                       alpha_hidden=args.alpha_hidden, cls_hidden=args.cls_hidden,
                       beta=args.beta, lam_a=args.lam_a, lam_b=args.lam_b)
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                       max_epochs=args.epochs, max_steps=args.max_steps,
                       early_stop=EarlyStop(args.patience, args.min_improvement), seed=seed,
                       split=args.split, neg_rois=args.neg_rois)
    result = train(ds.samples, tcfg, init_params(mcfg, seed=seed), table)
    base = Path(args.data) if args.data else Path(".")
    ckpt = Path(args.out) if args.out else base / "model.xatn"
    trace = Path(args.trace) if args.trace else ckpt.with_suffix(".loss.csv")
    save_checkpoint(result.params, ckpt, result.adam if args.save_adam else None)
    write_trace(trace, result.trace)
    print(f"trained {result.steps} steps over {len(result.trace)} epochs; best epoch {result.best_epoch}"
          f"{' (early stop)' if result.stopped_early else ''}")
    print(f"checkpoint: {ckpt}\nloss trace: {trace}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_rois
    from .errors import FeatureDimMismatch
    from .evaluation import infer
    from .io import atomic_write_text

    params = load_checkpoint(args.checkpoint)
    sets = read_rois(args.rois)
    if sets and sets[0].roi_dim != params.config.roi_dim:
        raise FeatureDimMismatch(f"ROI features have {sets[0].roi_dim} dims, model expects "
                                 f"{params.config.roi_dim}")
    dets = [infer(rs, params, args.nms) for rs in sets]
    atomic_write_text(args.out, "".join(d.to_json() + "\n" for d in dets))
    log.info("wrote %d detections to %s", len(dets), args.out)
    return EXIT_OK


def _read_detections(path):
    from .errors import ParseError
    from .evaluation import Detection

    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                dets.append(Detection.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return dets


def _targets_for(dets, reports_path):
    from .errors import IdMismatch
    from .text import extract_attributes, load_vocabulary, read_reports

    vocab = load_vocabulary()
    reports = {r.id: r for r in read_reports(reports_path)}
    probs, targets = [], []
    for d in dets:
        if d.image_id not in reports:
            raise IdMismatch(d.image_id, "detection has no report")
        attrs = extract_attributes(reports[d.image_id], vocab)
        if len(attrs) == 0:
            continue
        probs.append(d.attr_probs)
        targets.append(attrs.target(len(vocab)))
    return probs, targets


def cmd_eval(args) -> int:
    from .data import read_annotations
    from .evaluation import EvalReport, classification_metrics, localization_metrics
    from .io import atomic_write_text
    from .text import load_vocabulary

    dets = _read_detections(args.detections)
    report = EvalReport(hit_mode=args.hit_mode)
    if args.annotations:
        gt = read_annotations(args.annotations)
        scored = [d for d in dets if d.image_id in gt] if args.skip_missing else dets
        report.iou_hit_rate = localization_metrics(scored, gt, args.thresholds, args.hit_mode)
    if args.reports:
        probs, targets = _targets_for(dets, args.reports)
        if probs:
            res = classification_metrics(probs, targets)
            words = load_vocabulary().words
            report.attr_accuracy, report.attr_auc = res.accuracy, res.auc
            report.skipped_attributes = [words[j] for j in res.skipped]
    if not args.annotations and not args.reports:
        raise UsageError("eval: give --annotations and/or --reports")
    print(report.table(dataset=Path(args.detections).stem))
    if args.json:
        atomic_write_text(args.json, report.to_json() + "\n")
    return EXIT_OK


def cmd_severity(args) -> int:
    from .errors import IdMismatch, TooFewSamples
    from .evaluation import EvalReport, severity_correlation
    from .io import atomic_write_text
    from .text import load_vocabulary, read_reports

    vocab = load_vocabulary()
    names = [a.strip() for a in args.attributes.split(",") if a.strip()]
    unknown = [a for a in names if a not in vocab]
    if unknown:
        raise UsageError(f"--attributes: not in the attribute vocabulary: {', '.join(unknown)}")
    reports = {r.id: r for r in read_reports(args.reports)}
    probs = {a: [] for a in names}
    sev = []
    for d in _read_detections(args.detections):
        rep = reports.get(d.image_id)
        if rep is None:
            raise IdMismatch(d.image_id, "detection has no report")
        if rep.severity is None:
            continue
        sev.append(rep.severity)
        for a in names:
            probs[a].append(d.attr_probs[vocab.index[a]])
    if len(sev) < args.folds:
        raise TooFewSamples(f"{len(sev)} images carry a severity score; need >= {args.folds}")
    stats = severity_correlation(probs, sev, folds=args.folds, seed=resolve_seed(args.seed))
    report = EvalReport(severity_stats=stats)
    print(report.table())
    if args.json:
        atomic_write_text(args.json, report.to_json() + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, check_primitives, check_total_loss

    seed = resolve_seed(args.seed)
    results = check_primitives(args.points, seed)
    if not args.skip_loss:
        results["total_loss"] = max(check_total_loss(seed + s) for s in range(args.points))
    worst = 0.0
    for name, err in results.items():
        ok = err < TOLERANCE
        worst = max(worst, err)
        print(f"{'ok  ' if ok else 'FAIL'} {name:<20} max rel err {err:.3e}")
    if not math.isfinite(worst) or worst >= TOLERANCE:
        print(f"gradient check failed (tolerance {TOLERANCE:g})")
        return EXIT_NUMERIC
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="xattn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    table = {}

    def add(name, func, help_):
        p = subs.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int, default=None, help="random seed (fallback: $XATTN_SEED)")
        p.set_defaults(func=func)
        table[name] = p
        return p

    p = add("extract", cmd_extract, "extract attribute words from reports")
    p.add_argument("--reports", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--disease-terms", default=None, help="comma-separated disease words")

    p = add("embed", cmd_embed, "train skip-gram word vectors")
    p.add_argument("--corpus", help="reports .jsonl or text file (blank-line separated documents)")
    p.add_argument("--synthetic", type=int, default=0, help="use N templated reports instead of a corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--negatives", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--subsample", type=float, default=1e-3)

    p = add("synth", cmd_synth, "write a synthetic planted-correspondence dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=200)
    p.add_argument("--rois", type=int, default=20)
    p.add_argument("--feat-dim", type=int, default=64)
    p.add_argument("--attrs", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--format", choices=("jsonl", "bin"), default="jsonl")
    p.add_argument("--embeddings", help="reuse an existing embedding file")
    p.add_argument("--dim", type=int, default=256, help="embedding size when training one")
    p.add_argument("--corpus-reports", type=int, default=3000)
    p.add_argument("--embed-epochs", type=int, default=10)

    p = add("train", cmd_train, "train the grounding model")
    p.add_argument("--data", help="directory with reports.jsonl, rois.{jsonl,bin}, embeddings.txt")
    p.add_argument("--reports")
    p.add_argument("--rois")
    p.add_argument("--embeddings")
    p.add_argument("--out", help="checkpoint path (default DATA/model.xatn)")
    p.add_argument("--trace", help="loss CSV path (default next to the checkpoint)")
    p.add_argument("--epochs", type=int, default=185)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--patience", type=int, default=10, help="plateau window in epochs")
    p.add_argument("--min-improvement", type=float, default=1e-3)
    p.add_argument("--split", type=_floats, default=(0.9, 0.05, 0.05))
    p.add_argument("--neg-rois", type=int, default=None)
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--lam-a", type=float, default=1.0)
    p.add_argument("--lam-b", type=float, default=1.0)
    p.add_argument("--alpha-hidden", type=_ints, default=(1024, 512))
    p.add_argument("--cls-hidden", type=_ints, default=(512, 512, 256, 128))
    p.add_argument("--save-adam", action="store_true")

    p = add("infer", cmd_infer, "select boxes and attribute probabilities without text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rois", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nms", type=float, default=0.5)

    p = add("eval", cmd_eval, "localization hit rates and attribute metrics")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations")
    p.add_argument("--reports", help="reports used to derive attribute targets")
    p.add_argument("--thresholds", type=_floats, default=(0.25, 0.5, 0.75))
    p.add_argument("--hit-mode", choices=("top1", "any"), default="top1")
    p.add_argument("--skip-missing", action="store_true", help="ignore detections without annotations")
    p.add_argument("--json")

    p = add("severity", cmd_severity, "correlate attribute probabilities with severity scores")
    p.add_argument("--detections", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--attributes", default="severe,moderate,diffuse,small")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--json")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the autodiff engine")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--skip-loss", action="store_true")
    return parser, table


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        pre = parser.parse_args(argv)
        args = _apply_config(parser, subs[pre.command], argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xattn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"xattn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"xattn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except XattnError as exc:
        print(f"xattn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: corpus -> pretrain -> extract -> probe/mil/retrieve -> report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import Config, ConfigError, format_config, parse_config

log = logging.getLogger("stainssl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="root seed for every random stream")
    p.add_argument("--config", default=d(None), help="key = value configuration file")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="pin numeric kernels to one thread for bit-exact reruns")
    p.add_argument("--workers", type=int, default=d(1), help="worker processes for corpus generation")
    p.add_argument("--print-config", action="store_true", default=d(False),
                   help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stainssl", description=__doc__)
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic stain corpus")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="self-distillation pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, help="override dino.epochs")

    p = sub.add_parser("extract", parents=[common], help="teacher-backbone features for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output feature file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--random-init", action="store_true", help="use a freshly initialized encoder")

    p = sub.add_parser("probe", parents=[common], help="k-fold linear/MLP probe")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("linear", "mlp"))
    p.add_argument("--folds", type=int)
    p.add_argument("--name", help="model label in the report (default: feature file stem)")
    p.add_argument("--out", default=".")

    p = sub.add_parser("mil", parents=[common], help="k-fold slide-level ABMIL/SiMLP")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", choices=("abmil", "simlp"), default="abmil")
    p.add_argument("--folds", type=int)
    p.add_argument("--name")
    p.add_argument("--out", default=".")

    p = sub.add_parser("retrieve", parents=[common], help="leave-one-out Recall@K / mAP@K")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--name")
    p.add_argument("--out", default=".")

    p = sub.add_parser("ablate", parents=[common], help="few-ratio, checkpoint or data-scale ablation")
    p.add_argument("--kind", required=True, choices=("few_ratio", "checkpoint_iters", "data_ratio"))
    p.add_argument("--corpus")
    p.add_argument("--run")
    p.add_argument("--epochs", type=int, help="pre-training epochs for data_ratio")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", parents=[common], help="figures and summary tables from run outputs")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


# --- subcommands ------------------------------------------------------------

def _manifest_maps(path):
    from .corpus import read_manifest

    rows = read_manifest(path)
    return {r.patch_id: r.slide_id for r in rows}, {r.patch_id: r.class_id for r in rows}


def _labeled(features_path, manifest_path):
    from .downstream import FeatureMatrix, read_features

    fm = read_features(features_path)
    slide_of, label_of = _manifest_maps(manifest_path)
    missing = [i for i in fm.ids if i not in slide_of]
    if missing:
        raise ValueError(f"{len(missing)} feature ids missing from {manifest_path}, e.g. {missing[0]}")
    if fm.labels is None:
        fm = FeatureMatrix(fm.ids, fm.X, [label_of[i] for i in fm.ids])
    return fm, slide_of


def cmd_gen_corpus(args, cfg: Config) -> int:
    from .corpus import build_corpus

    summary = build_corpus(cfg.corpus(), args.out, seed=args.seed, workers=args.workers)
    print(summary.line())
    return EXIT_OK


def cmd_pretrain(args, cfg: Config) -> int:
    from dataclasses import replace

    from .corpus import load_patches
    from .dino import pretrain

    dcfg = cfg.dino()
    if args.epochs is not None:
        dcfg = replace(dcfg, epochs=args.epochs)
    rows, px = load_patches(args.corpus)
    if not rows:
        raise ValueError(f"corpus {args.corpus} has no patches")
    res = pretrain(px, dcfg, cfg.vit(), cfg.head(), args.seed, args.out, aug=cfg.augment())
    for e, loss in enumerate(res.epoch_losses, start=1):
        print(f"epoch {e} loss {loss:.4f}")
    print(f"checkpoints: {', '.join(str(p) for p in res.checkpoints.values())}")
    print(f"final collapse fraction {res.final_collapse:.3f}")
    return EXIT_OK


def cmd_extract(args, cfg: Config) -> int:
    from .corpus import load_patches
    from .dino import init_state
    from .downstream import extract_features, write_features

    if args.random_init:
        state = init_state(cfg.vit(), cfg.head(), cfg.dino(), args.seed)
    else:
        state = args.checkpoint
    rows, px = load_patches(args.corpus)
    fm = extract_features(state, px, [r.patch_id for r in rows], [r.class_id for r in rows])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_features(args.out, fm)
    print(f"{len(fm)} x {fm.X.shape[1]} features -> {args.out}")
    return EXIT_OK


def _emit_report(out_dir, reports) -> None:
    from .harness import append_jsonl

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    append_jsonl(out / "report.jsonl", [row for r in reports for row in r.rows])
    for r in reports:
        s = r.summary()
        print(f"{s['task']} {s['model']}: bal_acc {s['bal_acc_mean']:.4f}±{s['bal_acc_std']:.4f} "
              f"auc {s['auc_mean']:.4f} f1 {s['f1_mean']:.4f} over {s['n']} folds")


def cmd_probe(args, cfg: Config) -> int:
    from dataclasses import replace

    from .harness import probe_cv

    fm, slide_of = _labeled(args.features, args.manifest)
    pcfg = cfg.probe(seed=args.seed)
    if args.mode:
        pcfg = replace(pcfg, mode=args.mode)
    folds = args.folds or cfg["eval.folds"]
    name = args.name or f"{Path(args.features).stem}-{pcfg.mode}"
    rep = probe_cv(fm, slide_of, pcfg, folds=folds, seed=args.seed, task="probe", model=name)
    _emit_report(args.out, [rep])
    return EXIT_OK


def cmd_mil(args, cfg: Config) -> int:
    from .downstream import bags_from_features, mil_train, write_bags
    from .harness import MetricsReport, score_predictions, stratified_split

    fm, slide_of = _labeled(args.features, args.manifest)
    bags = bags_from_features(fm, slide_of)
    write_bags(Path(args.out) / "bags", bags)
    labels = [b.label for b in bags]
    k = max(labels) + 1
    folds = args.folds or cfg["eval.folds"]
    plan = stratified_split(list(range(len(bags))), labels, "kfold", args.seed, k=folds)
    mcfg = cfg.mil(seed=args.seed)
    rep = MetricsReport("mil", args.name or f"{Path(args.features).stem}-{args.model}")
    for f, (train, val) in enumerate(plan.rounds()):
        res = mil_train(bags, args.model, mcfg, {"train": train, "val": val}, n_classes=k)
        proba = np.array([_softmax(res.logits(bags[i])) for i in val])
        rep.add(f, score_predictions([labels[i] for i in val], proba, k))
    _emit_report(args.out, [rep])
    return EXIT_OK


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def cmd_retrieve(args, cfg: Config) -> int:
    from .downstream import read_features, retrieval_curves

    fm = read_features(args.features)
    if fm.labels is None:
        raise ValueError(f"{args.features} has no labels; retrieval needs them")
    kmax = args.k or cfg["eval.retrieval_k"]
    curves = retrieval_curves(fm, range(1, kmax + 1))
    name = args.name or Path(args.features).stem
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"retrieval_{name}.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model,k,recall,map\n")
        for k, (r, m) in curves.items():
            fh.write(f"{name},{k},{r:.6f},{m:.6f}\n")
    print(f"Recall@1 {curves[1][0]:.4f}  Recall@{kmax} {curves[kmax][0]:.4f}  mAP@{kmax} {curves[kmax][1]:.4f}")
    return EXIT_OK


def cmd_ablate(args, cfg: Config) -> int:
    from dataclasses import replace

    from .harness import AblationConfig, run_ablation

    dcfg = cfg.dino()
    if args.epochs is not None:
        dcfg = replace(dcfg, epochs=args.epochs)
    acfg = AblationConfig(out_dir=args.out, corpus_dir=args.corpus, run_dir=args.run,
                          ratios=cfg["eval.few_ratios"], caps=cfg["eval.caps"], folds=cfg["eval.folds"],
                          seed=args.seed, probe=cfg.probe(seed=args.seed), dino=dcfg, vit=cfg.vit(),
                          head=cfg.head(), corpus=cfg.corpus())
    reports = run_ablation(args.kind, acfg)
    for r in reports:
        s = r.summary()
        x = s["checkpoint"] if s["checkpoint"] is not None else s["ratio"]
        print(f"{args.kind} {x}: bal_acc {s['bal_acc_mean']:.4f}±{s['bal_acc_std']:.4f}")
    return EXIT_OK


def collect_reports(rows: list[dict]) -> list:
    """Group report.jsonl rows back into per-point MetricsReports."""
    from .harness import MetricsReport

    groups: dict = {}
    for r in rows:
        key = (r["task"], r["model"], r.get("ratio"), r.get("checkpoint"))
        if key not in groups:
            groups[key] = MetricsReport(r["task"], r["model"], ratio=r.get("ratio"), checkpoint=r.get("checkpoint"))
        groups[key].rows.append(r)
    return [groups[k] for k in sorted(groups, key=lambda k: tuple("" if v is None else str(v).zfill(12) for v in k))]


def cmd_report(args, cfg: Config) -> int:
    from .dino import read_loss_csv
    from .harness import read_jsonl, write_summary_csv
    from .plotting import plot_loss_curve, plot_metric_series, plot_retrieval_curves

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, curves, written = [], {}, []
    for d in map(Path, args.inputs):
        if not d.exists():
            raise FileNotFoundError(f"report input not found: {d}")
        files = [d] if d.is_file() else sorted(d.rglob("*"))
        for f in files:
            if f.name == "loss.csv":
                tag = f.parent.name
                written.append(plot_loss_curve(read_loss_csv(f), out / f"loss_{tag}.png"))
            elif f.name == "report.jsonl":
                rows.extend(read_jsonl(f))
            elif f.name.startswith("retrieval_") and f.suffix == ".csv":
                with open(f, encoding="utf-8") as fh:
                    for r in csv.DictReader(fh):
                        curves.setdefault(r["model"], {})[int(r["k"])] = (float(r["recall"]), float(r["map"]))
    if curves:
        written.append(plot_retrieval_curves(curves, out / "retrieval.png"))
    reports = collect_reports(rows)
    if reports:
        write_summary_csv(out / "summary.csv", reports)
        written.append(out / "summary.csv")
        sums = [r.summary() for r in reports]
        for task, x in (("few_ratio", "ratio"), ("checkpoint_iters", "checkpoint"), ("data_ratio", "ratio")):
            sel = [s for s in sums if s["task"] == task]
            if sel:
                written.append(plot_metric_series(sel, x, out / f"{task}.png"))
    if not written:
        raise FileNotFoundError(f"no loss.csv, report.jsonl or retrieval_*.csv under {', '.join(args.inputs)}")
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "extract": cmd_extract, "probe": cmd_probe,
    "mil": cmd_mil, "retrieve": cmd_retrieve, "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else Config()
    except (ConfigError, OSError) as exc:
        print(f"stainssl: config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.print_config:
        sys.stdout.write(format_config(cfg))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("stainssl: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    if args.deterministic:
        T.set_deterministic(True)
    try:
        return COMMANDS[args.command](args, cfg)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"stainssl {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"stainssl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if args.deterministic:
            T.set_deterministic(False)


if __name__ == "__main__":
    sys.exit(main())

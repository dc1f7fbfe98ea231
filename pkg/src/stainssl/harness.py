"""Evaluation protocols: stratified splits, subsampling, metrics, t-tests, ablations, reports."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.special import betainc
from scipy.stats import rankdata

from .rng import SplitMix, tag_of

log = logging.getLogger(__name__)

FEW_RATIOS = (0.1, 0.25, 0.5, 0.75, 1.0)


# --- splits -----------------------------------------------------------------

@dataclass
class SplitPlan:
    scheme: str  # "kfold" or "train_val_test"
    seed: int
    folds: list  # kfold: k id lists; train_val_test: [train, val, test]
    k: int = 0
    ratios: tuple = ()

    def rounds(self):
        """(train ids, held-out ids) per fold; for a 3-way plan one (train, val, test) round."""
        if self.scheme == "kfold":
            for i in range(len(self.folds)):
                train = [x for j, f in enumerate(self.folds) if j != i for x in f]
                yield train, list(self.folds[i])
        else:
            yield tuple(self.folds)


def _by_class(ids, labels) -> dict:
    groups: dict = {}
    for i, lab in zip(ids, labels):
        groups.setdefault(lab, []).append(i)
    return {c: groups[c] for c in sorted(groups)}


def _largest_remainder(n: int, ratios) -> list[int]:
    total = sum(Fraction(r).limit_denominator(10 ** 6) for r in ratios)
    quotas = [Fraction(r).limit_denominator(10 ** 6) * n / total for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(ids, labels, scheme: str = "kfold", seed: int = 0, k: int = 5,
                     ratios=(0.5, 0.2, 0.3)) -> SplitPlan:
    """Label-stratified k-fold or train/val/test split.

    k-fold: each class is shuffled and dealt round-robin, the dealing offset
    carrying over between classes so fold sizes stay within one of each
    other. 3-way: each class is shuffled and cut into contiguous parts sized
    by largest-remainder rounding.
    """
    ids, labels = list(ids), list(labels)
    if len(ids) != len(labels):
        raise ValueError(f"{len(ids)} ids but {len(labels)} labels")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    groups = _by_class(ids, labels)
    if scheme == "kfold":
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        folds: list = [[] for _ in range(k)]
        offset = 0
        for c, members in groups.items():
            if len(members) < k:
                raise ValueError(f"class {c!r} has {len(members)} members, fewer than k={k}")
            perm = SplitMix(seed, tag_of("kfold", str(c))).permutation(len(members))
            for j, p in enumerate(perm):
                folds[(offset + j) % k].append(members[p])
            offset = (offset + len(members)) % k
        return SplitPlan("kfold", seed, folds, k=k)
    if scheme in ("train_val_test", "3way"):
        if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
            raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
        parts: list = [[], [], []]
        for c, members in groups.items():
            if len(members) < 3:
                raise ValueError(f"class {c!r} has {len(members)} members, need at least 3")
            perm = SplitMix(seed, tag_of("3way", str(c))).permutation(len(members))
            counts = _largest_remainder(len(members), ratios)
            start = 0
            for part, cnt in zip(parts, counts):
                part.extend(members[p] for p in perm[start:start + cnt])
                start += cnt
        return SplitPlan("train_val_test", seed, parts, ratios=tuple(ratios))
    raise ValueError(f"unknown split scheme {scheme!r}")


def check_plan(plan: SplitPlan, ids, labels) -> None:
    """Raise AssertionError unless folds are disjoint, cover ``ids`` and are stratified within one."""
    seen = [x for f in plan.folds for x in f]
    assert len(seen) == len(set(seen)), "folds overlap"
    assert set(seen) == set(ids), "folds do not cover all ids"
    if plan.scheme == "kfold":
        label_of = dict(zip(ids, labels))
        for c in set(labels):
            per = [sum(1 for x in f if label_of[x] == c) for f in plan.folds]
            assert max(per) - min(per) <= 1, f"class {c} fold counts {per}"


def subsample_ratio(train_ids, labels, ratio: float, seed: int = 0, nested: bool = False) -> list:
    """Per-class sample of ceil(ratio * n_c) ids without replacement, in input order.

    With ``nested`` every class is ranked by one seeded permutation and the
    prefix is taken, so smaller ratios give subsets of larger ones.
    """
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    train_ids, labels = list(train_ids), list(labels)
    if ratio == 1:
        return train_ids
    keep = set()
    for c, members in _by_class(train_ids, labels).items():
        n = len(members)
        m = min(n, math.ceil(ratio * n - 1e-9))
        if nested:
            pick = SplitMix(seed, tag_of("nested", str(c))).permutation(n)[:m]
        else:
            pick = SplitMix(seed, tag_of("subsample", str(c), repr(float(ratio)))).choice(n, m)
        keep.update(members[i] for i in pick)
    return [i for i in train_ids if i in keep]


# --- metrics ----------------------------------------------------------------

def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    k = int(n_classes or max(y_true.max(initial=-1), y_pred.max(initial=-1)) + 1)
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.sum() < 1:
        raise ValueError("confusion matrix is empty")
    return cm.astype(np.int64)


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(Fraction(int(np.trace(cm)), int(cm.sum())))


def balanced_accuracy(cm) -> float:
    """Mean per-class recall; classes without samples count as recall 0."""
    cm = _check_cm(cm)
    support = cm.sum(axis=1)
    if np.any(support == 0):
        warnings.warn("classes without samples get recall 0", RuntimeWarning, stacklevel=2)
    recalls = [Fraction(int(cm[i, i]), int(s)) if s else Fraction(0) for i, s in enumerate(support)]
    return float(sum(recalls, Fraction(0)) / len(recalls))


def macro_f1(cm) -> float:
    """Mean over classes of 2 TP / (2 TP + FP + FN); an undefined F1 counts as 0."""
    cm = _check_cm(cm)
    f1s = []
    for i in range(cm.shape[0]):
        tp = int(cm[i, i])
        denom = 2 * tp + int(cm[:, i].sum() - tp) + int(cm[i, :].sum() - tp)
        if denom == 0:
            warnings.warn(f"class {i} never occurs nor is predicted; F1 counted as 0", RuntimeWarning, stacklevel=2)
            f1s.append(Fraction(0))
        else:
            f1s.append(Fraction(2 * tp, denom))
    return float(sum(f1s, Fraction(0)) / len(f1s))


def binary_auc_exact(scores, positive) -> Fraction:
    """Mann-Whitney AUC from midranks (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks2 = (2 * rankdata(scores, method="average")).astype(np.int64)  # midranks are half-integers
    r = int(ranks2[positive].sum())
    return Fraction(r - n_pos * (n_pos + 1), 2 * n_pos * n_neg)


def auc_ovr(scores, labels, return_skipped: bool = False):
    """Macro one-vs-rest AUC over classes with at least one positive and one negative."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError(f"scores {scores.shape} do not match {labels.size} labels")
    aucs, skipped = [], []
    for c in range(scores.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        aucs.append(binary_auc_exact(scores[:, c], pos))
    if not aucs:
        raise ValueError("no class has both positive and negative samples")
    value = float(sum(aucs, Fraction(0)) / len(aucs))
    return (value, skipped) if return_skipped else value


@dataclass
class TTestResult:
    statistic: float
    pvalue: float
    df: int
    note: str = ""


def t_sf_two_sided(t: float, df: int) -> float:
    """Two-sided Student-t tail probability P(|T| >= |t|) via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> TTestResult:
    """Paired two-sided t-test on per-fold metrics (sample standard deviation)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, df, "zero variance, zero mean")
        return TTestResult(math.copysign(math.inf, mean), 0.0, df, "zero variance, nonzero mean (p = 0 limit)")
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, df), df)


# --- reports ----------------------------------------------------------------

METRICS = ("acc", "bal_acc", "auc", "f1")


def score_predictions(y_true, proba: np.ndarray, n_classes: int) -> dict:
    cm = confusion_matrix(y_true, np.argmax(proba, axis=1), n_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        auc = auc_ovr(proba, y_true)
        return {"acc": accuracy(cm), "bal_acc": balanced_accuracy(cm), "auc": auc, "f1": macro_f1(cm)}


@dataclass
class MetricsReport:
    task: str
    model: str
    rows: list = field(default_factory=list)  # one dict per fold
    ratio: float | None = None
    checkpoint: int | None = None

    def add(self, fold: int, metrics: dict) -> None:
        row = {"task": self.task, "model": self.model, "fold": fold}
        if self.ratio is not None:
            row["ratio"] = self.ratio
        if self.checkpoint is not None:
            row["checkpoint"] = self.checkpoint
        row.update({m: float(metrics[m]) for m in METRICS})
        self.rows.append(row)

    def summary(self) -> dict:
        """Mean and population standard deviation (denominator n) across folds."""
        out = {"task": self.task, "model": self.model, "ratio": self.ratio, "checkpoint": self.checkpoint,
               "n": len(self.rows), "std_kind": "population, across folds"}
        for m in METRICS:
            vals = np.array([r[m] for r in self.rows])
            out[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
            out[f"{m}_std"] = float(vals.std(ddof=0)) if vals.size else float("nan")
        return out


def append_jsonl(path, rows) -> None:
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_summary_csv(path, reports: list) -> None:
    """One line per report with ``mean±std`` cells per metric."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task,model,ratio,checkpoint,n," + ",".join(METRICS) + "\n")
        for rep in reports:
            s = rep.summary()
            cells = [f"{s[m + '_mean']:.4f}±{s[m + '_std']:.4f}" for m in METRICS]
            ratio = "" if s["ratio"] is None else f"{s['ratio']:g}"
            ckpt = "" if s["checkpoint"] is None else str(s["checkpoint"])
            fh.write(f"{s['task']},{s['model']},{ratio},{ckpt},{s['n']}," + ",".join(cells) + "\n")


# --- probe evaluation protocol ----------------------------------------------

def expand_groups(group_ids, members: dict) -> list:
    return [m for g in group_ids for m in members[g]]


def probe_cv(fm, slide_of: dict, probe_cfg, *, folds: int = 5, seed: int = 0, ratio: float = 1.0,
             nested: bool = True, task: str = "probe", model: str | None = None,
             checkpoint: int | None = None, plan: SplitPlan | None = None) -> MetricsReport:
    """Slide-level stratified k-fold probe evaluation on a labeled feature matrix.

    Slides (not patches) are split so that no slide contributes to both the
    training and the held-out fold. With ``ratio < 1`` each training set is
    subsampled per class at the slide level.
    """
    from .downstream import probe_train

    index = {pid: i for i, pid in enumerate(fm.ids)}
    members: dict = {}
    slide_label: dict = {}
    for pid, lab in zip(fm.ids, fm.labels):
        s = slide_of[pid]
        members.setdefault(s, []).append(pid)
        slide_label[s] = int(lab)
    slides = sorted(members)
    plan = plan or stratified_split(slides, [slide_label[s] for s in slides], "kfold", seed, k=folds)
    k = int(fm.labels.max()) + 1
    rep = MetricsReport(task, model or probe_cfg.mode, ratio=ratio if ratio != 1.0 or task == "few_ratio" else None,
                        checkpoint=checkpoint)
    for f, (train_s, val_s) in enumerate(plan.rounds()):
        if ratio < 1:
            train_s = subsample_ratio(train_s, [slide_label[s] for s in train_s], ratio, seed + f, nested)
        split = {"train": [index[p] for p in expand_groups(train_s, members)],
                 "val": [index[p] for p in expand_groups(val_s, members)]}
        res = probe_train(fm.X, fm.labels, probe_cfg, split, n_classes=k)
        val = np.asarray(split["val"])
        rep.add(f, score_predictions(fm.labels[val], res.probe.predict_proba(fm.X[val]), k))
    return rep


def holdout_probe(fm, slide_of: dict, probe_cfg, seed: int = 0, ratios=(0.5, 0.2, 0.3)) -> dict:
    """Slide-level 3-way split: train, early-stop on val, score the held-out test slides."""
    from .downstream import probe_train

    index = {pid: i for i, pid in enumerate(fm.ids)}
    members: dict = {}
    slide_label: dict = {}
    for pid, lab in zip(fm.ids, fm.labels):
        members.setdefault(slide_of[pid], []).append(pid)
        slide_label[slide_of[pid]] = int(lab)
    slides = sorted(members)
    plan = stratified_split(slides, [slide_label[s] for s in slides], "train_val_test", seed, ratios=ratios)
    train_s, val_s, test_s = plan.folds
    split = {"train": [index[p] for p in expand_groups(train_s, members)],
             "val": [index[p] for p in expand_groups(val_s, members)]}
    k = int(fm.labels.max()) + 1
    res = probe_train(fm.X, fm.labels, probe_cfg, split, n_classes=k)
    test = np.array([index[p] for p in expand_groups(test_s, members)])
    out = score_predictions(fm.labels[test], res.probe.predict_proba(fm.X[test]), k)
    out["best_epoch"] = res.best_epoch
    return out


# --- ablations --------------------------------------------------------------

@dataclass
class AblationConfig:
    out_dir: str
    corpus_dir: str | None = None
    run_dir: str | None = None  # holds checkpoint_eXXXX.stnc files
    ratios: tuple = FEW_RATIOS
    caps: tuple = (10, 25)
    folds: int = 5
    seed: int = 0
    nested: bool = True
    probe: object = None  # ProbeConfig
    dino: object = None  # DinoConfig used for data_ratio pre-training
    vit: object = None
    head: object = None
    corpus: object = None  # CorpusConfig template for data_ratio


def _require(path, what: str) -> Path:
    p = Path(path) if path is not None else None
    if p is None or not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _labeled_features(state, corpus_dir):
    from .corpus import load_patches
    from .downstream import extract_features

    rows, px = load_patches(corpus_dir)
    fm = extract_features(state, px, [r.patch_id for r in rows], [r.class_id for r in rows])
    return fm, {r.patch_id: r.slide_id for r in rows}


def list_checkpoints(run_dir) -> dict:
    out = {}
    for p in sorted(Path(run_dir).glob("checkpoint_e*.stnc")):
        out[int(p.stem.split("_e")[1])] = p
    return out


def run_ablation(kind: str, cfg: AblationConfig) -> list[MetricsReport]:
    """Run one ablation series; rows go to ``out_dir/report.jsonl`` and a summary CSV."""
    from .dino import load_checkpoint
    from .downstream import ProbeConfig

    probe_cfg = cfg.probe or ProbeConfig()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    if kind == "few_ratio":
        run = _require(cfg.run_dir, "run directory")
        ckpts = list_checkpoints(run)
        if not ckpts:
            raise FileNotFoundError(f"no checkpoint in {run}")
        state = load_checkpoint(ckpts[max(ckpts)])
        fm, slide_of = _labeled_features(state, _require(cfg.corpus_dir, "corpus directory"))
        for r in cfg.ratios:
            reports.append(probe_cv(fm, slide_of, probe_cfg, folds=cfg.folds, seed=cfg.seed, ratio=r,
                                    nested=cfg.nested, task="few_ratio"))
    elif kind == "checkpoint_iters":
        run = _require(cfg.run_dir, "run directory")
        corpus = _require(cfg.corpus_dir, "corpus directory")
        ckpts = list_checkpoints(run)
        if not ckpts:
            raise FileNotFoundError(f"no checkpoint in {run}")
        for epoch, path in ckpts.items():
            fm, slide_of = _labeled_features(load_checkpoint(path), corpus)
            reports.append(probe_cv(fm, slide_of, probe_cfg, folds=cfg.folds, seed=cfg.seed,
                                    task="checkpoint_iters", checkpoint=epoch))
    elif kind == "data_ratio":
        from dataclasses import replace

        from .corpus import CorpusConfig, build_corpus, load_patches
        from .dino import DinoConfig, pretrain
        from .encoder import DinoHeadConfig, ViTConfig

        base = cfg.corpus or CorpusConfig()
        dcfg = cfg.dino or DinoConfig(epochs=5)
        vit, head = cfg.vit or ViTConfig(), cfg.head or DinoHeadConfig()
        for cap in cfg.caps:
            cdir = out / f"corpus_cap{cap}"
            build_corpus(replace(base, cap=cap), cdir, seed=cfg.seed)
            rows, px = load_patches(cdir)
            res = pretrain(px, dcfg, vit, head, cfg.seed, out / f"run_cap{cap}")
            fm, slide_of = _labeled_features(res.state, cdir)
            rep = probe_cv(fm, slide_of, probe_cfg, folds=cfg.folds, seed=cfg.seed, task="data_ratio")
            rep.ratio = float(cap)
            for row in rep.rows:
                row["cap"] = cap
                row["ratio"] = float(cap)
            reports.append(rep)
    else:
        raise ValueError(f"unknown ablation kind {kind!r}")
    append_jsonl(out / "report.jsonl", [row for rep in reports for row in rep.rows])
    write_summary_csv(out / f"summary_{kind}.csv", reports)
    return reports


def summaries(reports) -> list[dict]:
    return [rep.summary() for rep in reports]


def report_to_dict(rep: MetricsReport) -> dict:
    return asdict(rep)

"""Frozen-feature evaluation: extraction, probes, MIL aggregators and retrieval."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import crop_resize, normalize, to_chw
from .encoder import ViTConfig, vit_forward
from .rng import SplitMix, tag_of

FEATURE_MAGIC = b"STNF"
FEATURE_VERSION = 1


class FeatureFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class FeatureMatrix:
    ids: list
    X: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.X.ndim != 2 or self.X.shape[0] != len(self.ids):
            raise T.DimensionError(f"{len(self.ids)} ids for a feature matrix of shape {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("feature matrix contains non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.ids),):
                raise T.DimensionError(f"{self.labels.shape[0]} labels for {len(self.ids)} rows")

    def __len__(self):
        return len(self.ids)


@dataclass
class Bag:
    slide_id: str
    X: np.ndarray
    label: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError(f"bag {self.slide_id} needs at least one instance, got shape {self.X.shape}")


# --- feature files ----------------------------------------------------------

def encode_features(fm: FeatureMatrix) -> bytes:
    n, c = fm.X.shape
    parts = [FEATURE_MAGIC, struct.pack("<III", FEATURE_VERSION, n, c),
             np.ascontiguousarray(fm.X, dtype="<f4").tobytes()]
    for i in fm.ids:
        b = str(i).encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b)
    if fm.labels is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + np.asarray(fm.labels, dtype="<i4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes) -> FeatureMatrix:
    pos = 0

    def take(k, what):
        nonlocal pos
        if pos + k > len(buf):
            raise FeatureFormatError(f"truncated while reading {what}", pos)
        out = buf[pos:pos + k]
        pos += k
        return out

    if take(4, "magic") != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic, not a feature file", 0)
    version, n, c = struct.unpack("<III", take(12, "header"))
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    X = np.frombuffer(take(4 * n * c, "feature data"), dtype="<f4").astype(np.float32).reshape(n, c)
    ids = []
    for _ in range(n):
        (k,) = struct.unpack("<H", take(2, "id length"))
        at = pos
        try:
            ids.append(take(k, "id").decode("utf-8"))
        except UnicodeDecodeError:
            raise FeatureFormatError("id is not UTF-8", at) from None
    flag = take(1, "label flag")[0]
    labels = None
    if flag == 1:
        labels = np.frombuffer(take(4 * n, "labels"), dtype="<i4").astype(np.int64)
    elif flag != 0:
        raise FeatureFormatError(f"bad label flag {flag}", pos - 1)
    if pos != len(buf):
        raise FeatureFormatError("trailing bytes", pos)
    return FeatureMatrix(ids, X, labels)


def write_features(path, fm: FeatureMatrix) -> None:
    Path(path).write_bytes(encode_features(fm))


def read_features(path) -> FeatureMatrix:
    return decode_features(Path(path).read_bytes())


# --- extraction -------------------------------------------------------------

def preprocess(pixels: np.ndarray, image_size: int, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    """Deterministic resize + normalize of uint8 patches to B x 3 x S x S."""
    n, h, w = pixels.shape[:3]
    boxes = np.tile(np.array([0, 0, h, w]), (n, 1))
    return to_chw(normalize(crop_resize(pixels, boxes, image_size), mean, std))


def backbone_features(params: dict, vit: ViTConfig, pixels: np.ndarray, batch: int = 256) -> np.ndarray:
    """CLS embeddings (N x d) of a backbone parameter set, outside any graph."""
    pe = params["patch_embed.weight"].shape
    if pe != (vit.channels * vit.patch_size ** 2, vit.embed_dim):
        raise T.DimensionError(f"patch_embed.weight {pe} does not match the encoder configuration")
    out = np.empty((pixels.shape[0], vit.embed_dim), dtype=np.float32)
    with T.precision("float32"):
        for s in range(0, pixels.shape[0], batch):
            x = preprocess(pixels[s:s + batch], vit.image_size)
            out[s:s + batch] = vit_forward(x, params, vit).data
    return out


def extract_features(state, pixels: np.ndarray, ids, labels=None, batch: int = 256) -> FeatureMatrix:
    """Teacher-backbone CLS features for uint8 patches (N x S x S x 3).

    ``state`` is a :class:`~stainssl.dino.DinoState` or a checkpoint path.
    """
    if isinstance(state, (str, Path)):
        from .dino import load_checkpoint

        state = load_checkpoint(state)
    if pixels.ndim != 4 or pixels.shape[-1] != 3:
        raise T.DimensionError(f"expected N x S x S x 3 patches, got {pixels.shape}")
    X = backbone_features(state.teacher, state.vit, pixels, batch)
    return FeatureMatrix(list(ids), X, labels)


# --- shared training pieces -------------------------------------------------

def _trunc(rng: SplitMix, shape, std):
    return rng.truncated_normal(int(np.prod(shape)), std).reshape(shape)


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((y.size, k), dtype=T.default_dtype())
    out[np.arange(y.size), y] = 1
    return out


def _confusion(y_true, y_pred, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def _balanced_accuracy(y_true, y_pred, k: int) -> float:
    m = _confusion(y_true, y_pred, k)
    support = m.sum(axis=1)
    recalls = np.where(support > 0, np.diag(m) / np.maximum(support, 1), 0.0)
    return float(recalls.mean())


class _EarlyStopper:
    """Keep the best state by strictly improving score; stop ``patience`` epochs after it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.best_params = None

    def update(self, epoch: int, score: float, params: dict) -> bool:
        if score > self.best:
            self.best, self.best_epoch = score, epoch
            self.best_params = {k: v.data.copy() for k, v in params.items()}
        return epoch - self.best_epoch >= self.patience


# --- probes -----------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "linear"
    hidden: int = 0  # 0 -> input width
    epochs: int = 20
    batch: int = 128
    lr: float = 1e-4
    wd: float = 1e-4
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("linear", "mlp"):
            raise ValueError(f"probe mode must be linear or mlp, got {self.mode!r}")
        if self.hidden < 0:
            raise ValueError("hidden width must be >= 1 (or 0 for the input width)")


@dataclass
class Probe:
    mode: str
    params: dict
    n_classes: int

    def logits(self, X) -> T.Tensor:
        p = self.params
        h = T.tensor(np.asarray(X, dtype=T.default_dtype()))
        if self.mode == "mlp":
            h = T.activation(T.linear(h, p["fc1.weight"], p["fc1.bias"]), "relu")
            return T.linear(h, p["fc2.weight"], p["fc2.bias"])
        return T.linear(h, p["fc.weight"], p["fc.bias"])

    def predict_proba(self, X) -> np.ndarray:
        return T.softmax(self.logits(X), axis=-1).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X).data, axis=-1)


@dataclass
class ProbeResult:
    probe: Probe
    history: list  # per-epoch validation balanced accuracy
    best_epoch: int
    stopped_epoch: int
    best_score: float
    train_loss: list = field(default_factory=list)


def init_probe(mode: str, c: int, k: int, hidden: int, seed: int) -> dict:
    rng = SplitMix(seed, tag_of("probe-init"))
    if mode == "mlp":
        hid = hidden or c
        p = {"fc1.weight": _trunc(rng, (c, hid), 0.01), "fc1.bias": np.zeros(hid),
             "fc2.weight": _trunc(rng, (hid, k), 0.01), "fc2.bias": np.zeros(k)}
    else:
        p = {"fc.weight": _trunc(rng, (c, k), 0.01), "fc.bias": np.zeros(k)}
    return {n: T.parameter(a, name=n) for n, a in p.items()}


def _fit(params: dict, forward, X, y: np.ndarray, split: dict, k: int, epochs: int, batch: int, lr: float,
         wd: float, patience: int, seed: int, tag: str):
    """Mini-batch AdamW with softmax cross-entropy and best-val checkpointing.

    Only rows listed in ``split['train']`` and ``split['val']`` are read from ``X``.
    """
    train_idx = np.asarray(split["train"], dtype=np.int64)
    val_idx = np.asarray(split["val"], dtype=np.int64)
    y = np.asarray(y)
    if np.unique(y[train_idx]).size < 2:
        raise ValueError("training split contains a single class")
    Xtr = np.asarray(X[train_idx], dtype=T.default_dtype())
    Xva = np.asarray(X[val_idx], dtype=T.default_dtype())
    ytr, yva = y[train_idx], y[val_idx]
    opt = T.AdamWState(lr=lr, weight_decay=wd)
    no_decay = [n for n in params if n.endswith("bias")]
    stopper = _EarlyStopper(patience)
    history, losses = [], []
    stopped = epochs
    for epoch in range(1, epochs + 1):
        order = SplitMix(seed, tag_of(tag, epoch)).permutation(train_idx.size)
        ep_loss = []
        for s in range(0, order.size, batch):
            rows = order[s:s + batch]
            T.zero_grads(params)
            with T.Graph() as g:
                loss = T.cross_entropy_soft(forward(Xtr[rows]), _one_hot(ytr[rows], k), 1.0)
            T.backward(g, loss)
            T.adamw_step(params, None, opt, no_decay=no_decay)
            ep_loss.append(float(loss.data))
        losses.append(float(np.mean(ep_loss)))
        pred = np.argmax(forward(Xva).data, axis=-1)
        score = _balanced_accuracy(yva, pred, k)
        history.append(score)
        if stopper.update(epoch, score, params):
            stopped = epoch
            break
    for n, a in stopper.best_params.items():
        params[n].data = a
    return history, losses, stopper.best_epoch, stopped, stopper.best


def probe_train(X, labels, cfg: ProbeConfig, split: dict, n_classes: int | None = None) -> ProbeResult:
    """Train a linear or MLP probe on frozen features.

    ``split`` maps ``train``/``val`` to row indices; the returned probe holds
    the weights of the epoch with the best validation balanced accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = int(n_classes or labels.max() + 1)
    c = X.shape[1]
    params = init_probe(cfg.mode, c, k, cfg.hidden, cfg.seed)
    probe = Probe(cfg.mode, params, k)
    history, losses, best_epoch, stopped, best = _fit(
        params, probe.logits, X, labels, split, k, cfg.epochs, cfg.batch, cfg.lr, cfg.wd, cfg.patience,
        cfg.seed, "probe")
    return ProbeResult(probe, history, best_epoch, stopped, best, losses)


# --- MIL aggregators --------------------------------------------------------

def canonical_order(X: np.ndarray) -> np.ndarray:
    """Row permutation sorting instances lexicographically (first column most significant).

    Aggregating in this order makes bag outputs bit-identical under any
    permutation of the input instances.
    """
    X = np.asarray(X)
    return np.lexsort(X.T[::-1]) if X.shape[0] > 1 else np.zeros(X.shape[0], dtype=np.int64)


@dataclass(frozen=True)
class MILConfig:
    epochs: int = 20
    lr: float = 1e-4
    wd: float = 1e-4
    patience: int = 5
    attn_dim: int = 128
    hidden: int = 0  # SiMLP hidden width, 0 -> input width
    seed: int = 0


def init_abmil(c: int, k: int, attn_dim: int = 128, seed: int = 0) -> dict:
    rng = SplitMix(seed, tag_of("abmil-init"))
    s = 1 / np.sqrt(c)
    p = {"attn.V.weight": _trunc(rng, (c, attn_dim), s), "attn.V.bias": np.zeros(attn_dim),
         "attn.U.weight": _trunc(rng, (c, attn_dim), s), "attn.U.bias": np.zeros(attn_dim),
         "attn.w.weight": _trunc(rng, (attn_dim, 1), 1 / np.sqrt(attn_dim)), "attn.w.bias": np.zeros(1),
         "cls.weight": _trunc(rng, (c, k), s), "cls.bias": np.zeros(k)}
    return {n: T.parameter(a, name=n) for n, a in p.items()}


def init_simlp(c: int, k: int, hidden: int = 0, seed: int = 0) -> dict:
    rng = SplitMix(seed, tag_of("simlp-init"))
    hid = hidden or c
    p = {"fc1.weight": _trunc(rng, (c, hid), 1 / np.sqrt(c)), "fc1.bias": np.zeros(hid),
         "fc2.weight": _trunc(rng, (hid, k), 1 / np.sqrt(hid)), "fc2.bias": np.zeros(k)}
    return {n: T.parameter(a, name=n) for n, a in p.items()}


def abmil_forward(bag, params: dict):
    """Gated-attention pooling: returns (1 x K logits, attention over instances in input order)."""
    X = np.asarray(getattr(bag, "X", bag), dtype=T.default_dtype())
    order = canonical_order(X)
    h = T.tensor(X[order])
    a_tanh = T.activation(T.linear(h, params["attn.V.weight"], params["attn.V.bias"]), "tanh")
    a_sig = T.activation(T.linear(h, params["attn.U.weight"], params["attn.U.bias"]), "sigmoid")
    e = T.linear(a_tanh * a_sig, params["attn.w.weight"], params["attn.w.bias"])  # N x 1
    a = T.softmax(T.reshape(e, (1, -1)), axis=-1)  # 1 x N
    z = T.matmul(a, h)  # 1 x C
    logits = T.linear(z, params["cls.weight"], params["cls.bias"])
    attention = np.empty(X.shape[0], dtype=a.data.dtype)
    attention[order] = a.data[0]
    return logits, attention


def simlp_forward(bag, params: dict) -> T.Tensor:
    """Mean pooling followed by Linear -> ReLU -> Linear."""
    X = np.asarray(getattr(bag, "X", bag), dtype=T.default_dtype())
    z = X[canonical_order(X)].mean(axis=0, keepdims=True)
    h = T.activation(T.linear(z, params["fc1.weight"], params["fc1.bias"]), "relu")
    return T.linear(h, params["fc2.weight"], params["fc2.bias"])


@dataclass
class MILResult:
    model: str
    params: dict
    history: list
    train_loss: list
    best_epoch: int
    stopped_epoch: int
    best_score: float

    def logits(self, bag) -> np.ndarray:
        if self.model == "abmil":
            return abmil_forward(bag, self.params)[0].data[0]
        return simlp_forward(bag, self.params).data[0]

    def predict(self, bags) -> np.ndarray:
        return np.array([int(np.argmax(self.logits(b))) for b in bags])


class _BagView:
    """Index adapter so MIL training can reuse the probe fitting loop bag by bag."""

    def __init__(self, bags):
        self.bags = bags

    def __getitem__(self, idx):
        return [self.bags[i] for i in np.atleast_1d(idx)]


def mil_train(bags: list, model: str, cfg: MILConfig, split: dict, n_classes: int | None = None) -> MILResult:
    """Train ABMIL or SiMLP with one bag per step and best-val checkpointing."""
    if model not in ("abmil", "simlp"):
        raise ValueError(f"unknown MIL model {model!r}")
    labels = np.array([b.label for b in bags], dtype=np.int64)
    train_idx = np.asarray(split["train"], dtype=np.int64)
    val_idx = np.asarray(split["val"], dtype=np.int64)
    if np.unique(labels[train_idx]).size < 2:
        raise ValueError("training split contains a single class")
    k = int(n_classes or labels.max() + 1)
    c = bags[0].X.shape[1]
    if model == "abmil":
        params = init_abmil(c, k, cfg.attn_dim, cfg.seed)
        fwd = lambda b: abmil_forward(b, params)[0]  # noqa: E731
    else:
        params = init_simlp(c, k, cfg.hidden, cfg.seed)
        fwd = lambda b: simlp_forward(b, params)  # noqa: E731
    opt = T.AdamWState(lr=cfg.lr, weight_decay=cfg.wd)
    no_decay = [n for n in params if n.endswith("bias")]
    stopper = _EarlyStopper(cfg.patience)
    history, losses = [], []
    stopped = cfg.epochs
    for epoch in range(1, cfg.epochs + 1):
        order = SplitMix(cfg.seed, tag_of("mil", epoch)).permutation(train_idx.size)
        ep = []
        for i in train_idx[order]:
            T.zero_grads(params)
            with T.Graph() as g:
                loss = T.cross_entropy_soft(fwd(bags[i]), _one_hot(labels[i:i + 1], k), 1.0)
            T.backward(g, loss)
            T.adamw_step(params, None, opt, no_decay=no_decay)
            ep.append(float(loss.data))
        losses.append(float(np.mean(ep)))
        pred = [int(np.argmax(fwd(bags[i]).data)) for i in val_idx]
        score = _balanced_accuracy(labels[val_idx], pred, k)
        history.append(score)
        if stopper.update(epoch, score, params):
            stopped = epoch
            break
    for n, a in stopper.best_params.items():
        params[n].data = a
    return MILResult(model, params, history, losses, stopper.best_epoch, stopped, stopper.best)


def bags_from_features(fm: FeatureMatrix, slide_of: dict) -> list[Bag]:
    """Group feature rows into per-slide bags; bag label is the (shared) row label."""
    groups: dict = {}
    for i, pid in enumerate(fm.ids):
        groups.setdefault(slide_of[pid], []).append(i)
    bags = []
    for sid in sorted(groups):
        rows = groups[sid]
        labs = set(int(fm.labels[r]) for r in rows) if fm.labels is not None else {0}
        if len(labs) != 1:
            raise ValueError(f"slide {sid} has mixed labels {sorted(labs)}")
        bags.append(Bag(sid, fm.X[rows], labs.pop()))
    return bags


def write_bags(out_dir, bags: list[Bag]) -> Path:
    """One feature file per slide plus ``bags.csv`` (``slide_id,path,label``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "bags.csv"
    with open(manifest, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("slide_id,path,label\n")
        for b in bags:
            name = f"{b.slide_id}.stnf"
            ids = [f"{b.slide_id}:{i}" for i in range(b.X.shape[0])]
            write_features(out / name, FeatureMatrix(ids, b.X))
            fh.write(f"{b.slide_id},{name},{b.label}\n")
    return manifest


def read_bags(manifest) -> list[Bag]:
    manifest = Path(manifest)
    with open(manifest, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Bag(r["slide_id"], read_features(manifest.parent / r["path"]).X, int(r["label"])) for r in rows]


# --- retrieval --------------------------------------------------------------

def _unit_rows(X: np.ndarray, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norms = np.sqrt((X * X).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"{what} row {int(bad[0])} has zero norm; cosine similarity is undefined")
    return X / norms[:, None]


def retrieve(query: np.ndarray, gallery: np.ndarray, k: int, gallery_ids, query_ids=None) -> list[list]:
    """Top-``k`` gallery ids per query by cosine similarity (ties by ascending id).

    When ``query_ids`` is given, a gallery item with the same id as the query
    is excluded from that query's ranking. Similarities are rounded to 12
    decimals so that rescaled copies of a vector tie exactly.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    gallery_ids = list(gallery_ids)
    if len(gallery_ids) == 0:
        raise ValueError("empty gallery")
    q = _unit_rows(np.atleast_2d(query), "query")
    g = _unit_rows(gallery, "gallery")
    sims = np.round(q @ g.T, 12)
    id_rank = np.empty(len(gallery_ids), dtype=np.int64)
    id_rank[sorted(range(len(gallery_ids)), key=lambda i: gallery_ids[i])] = np.arange(len(gallery_ids))
    pos = {gid: i for i, gid in enumerate(gallery_ids)}
    out = []
    for r in range(q.shape[0]):
        order = np.lexsort((id_rank, -sims[r]))
        if query_ids is not None and query_ids[r] in pos:
            order = order[order != pos[query_ids[r]]]
        out.append([gallery_ids[i] for i in order[:k]])
    return out


def leave_one_out(fm: FeatureMatrix, k: int) -> list[list]:
    """Every item queries all other items of the same feature matrix."""
    return retrieve(fm.X, fm.X, k, fm.ids, query_ids=fm.ids)


def _relevant(ranking, query_label, label_of) -> list[bool]:
    return [label_of[g] == query_label for g in ranking]


def recall_at_k_exact(rankings, query_labels, label_of: dict, k: int) -> Fraction:
    hits = sum(1 for r, ql in zip(rankings, query_labels) if any(_relevant(r[:k], ql, label_of)))
    return Fraction(hits, len(rankings))


def average_precision_at_k(relevant: list[bool], n_relevant: int, k: int, norm: str = "r") -> Fraction:
    """Sum of precision@i over relevant ranks i <= k, divided by ``n_relevant``.

    ``norm="min"`` divides by min(k, n_relevant) instead, which reaches 1 at
    k < n_relevant but is not monotone in k: [rel, non] with two relevant
    items gives AP@1 = 1 and AP@2 = 1/2.
    """
    if norm not in ("r", "min"):
        raise ValueError(f"unknown AP normalization {norm!r}")
    ranks = [i for i, rel in enumerate(relevant[:k], start=1) if rel]
    if not ranks:
        return Fraction(0)
    # one common denominator keeps the sum exact without per-term gcds
    lcm = math.lcm(*ranks)
    num = sum(h * (lcm // i) for h, i in enumerate(ranks, start=1))
    return Fraction(num, lcm * (n_relevant if norm == "r" else min(k, n_relevant)))


def map_at_k_exact(rankings, query_labels, label_of: dict, k: int, query_ids=None,
                   norm: str = "r") -> tuple[Fraction, int]:
    """(mAP@K, number of skipped queries without any relevant gallery item)."""
    counts: dict = {}
    for lab in label_of.values():
        counts[lab] = counts.get(lab, 0) + 1
    aps, skipped = [], 0
    for j, (r, ql) in enumerate(zip(rankings, query_labels)):
        n_rel = counts.get(ql, 0)
        if query_ids is not None and query_ids[j] in label_of and label_of[query_ids[j]] == ql:
            n_rel -= 1
        if n_rel == 0:
            skipped += 1
            continue
        aps.append(average_precision_at_k(_relevant(r, ql, label_of), n_rel, k, norm))
    if not aps:
        return Fraction(0), skipped
    return sum(aps, Fraction(0)) / len(aps), skipped


def recall_at_k(rankings, query_labels, label_of: dict, k: int) -> float:
    """Fraction of queries with at least one same-label item in their top ``k``."""
    return float(recall_at_k_exact(rankings, query_labels, label_of, k))


def map_at_k(rankings, query_labels, label_of: dict, k: int, query_ids=None, norm: str = "r") -> float:
    """Mean AP@K; ``query_ids`` removes each query from its own relevant count."""
    return float(map_at_k_exact(rankings, query_labels, label_of, k, query_ids, norm)[0])


def retrieval_curves(fm: FeatureMatrix, ks=range(1, 21)) -> dict:
    """Leave-one-out Recall@K and mAP@K for every K in ``ks``."""
    ks = list(ks)
    rankings = leave_one_out(fm, max(ks))
    label_of = dict(zip(fm.ids, (int(x) for x in fm.labels)))
    ql = [int(x) for x in fm.labels]
    return {k: (recall_at_k(rankings, ql, label_of, k), map_at_k(rankings, ql, label_of, k, fm.ids)) for k in ks}

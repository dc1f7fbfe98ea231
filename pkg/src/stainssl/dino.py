"""Self-distillation training: EMA teacher, centering, multi-view loss, schedules, checkpoints."""

from __future__ import annotations

import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, multi_crop_batch
from .encoder import (DinoHeadConfig, ViTConfig, clone_params, dino_head, init_params, is_no_decay,
                      vit_forward)
from .rng import SplitMix, tag_of
from .tensor import AdamWState, Tensor

log = logging.getLogger(__name__)

MAGIC = b"STNC"
VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DinoConfig:
    epochs: int = 100
    batch: int = 64
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    wd_start: float = 0.04
    wd_end: float = 0.4
    momentum_start: float = 0.9995
    momentum_end: float = 1.0
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9
    warmup_teacher_temp: float = 0.04
    warmup_teacher_temp_epochs: int = 0
    freeze_last_layer_epochs: int = 0
    grad_clip: float = 3.0
    warmup_frac: float = 0.05
    min_lr: float = 1e-6
    constant_lr: bool = False
    lr_ref_batch: int = 0  # > 0: scale lr by batch / lr_ref_batch
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        if not 0 < self.teacher_temp <= self.student_temp:
            raise ValueError(f"need 0 < teacher_temp <= student_temp, got {self.teacher_temp}, {self.student_temp}")
        if not 0 < self.warmup_teacher_temp <= self.student_temp:
            raise ValueError("warmup_teacher_temp must lie in (0, student_temp]")
        if not self.momentum_start <= self.momentum_end <= 1:
            raise ValueError(f"need momentum_start <= momentum_end <= 1, got {self.momentum_start}, {self.momentum_end}")
        if self.wd_start > self.wd_end:
            raise ValueError(f"need wd_start <= wd_end, got {self.wd_start}, {self.wd_end}")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if not 0 <= self.center_momentum <= 1:
            raise ValueError("center_momentum must lie in [0, 1]")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")

    @property
    def base_lr(self) -> float:
        if self.lr_ref_batch > 0:
            return self.lr * self.batch / self.lr_ref_batch
        return self.lr


@dataclass
class DinoState:
    student: dict
    teacher: dict
    center: np.ndarray
    opt: AdamWState
    step: int = 0
    epoch: int = 0
    vit: ViTConfig = field(default_factory=ViTConfig)
    head: DinoHeadConfig = field(default_factory=DinoHeadConfig)


def init_state(vit: ViTConfig, head: DinoHeadConfig, cfg: DinoConfig, seed: int) -> DinoState:
    """Fresh student, a teacher copied from it, zero center and empty moments."""
    student = init_params(vit, head, seed)
    teacher = clone_params(student, requires_grad=False)
    opt = AdamWState(lr=cfg.base_lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps,
                     weight_decay=cfg.wd_start)
    center = np.zeros(head.out_dim, dtype=np.float32)
    return DinoState(student, teacher, center, opt, vit=vit, head=head)


# --- schedules --------------------------------------------------------------

def schedule_value(kind: str, v0: float, v1: float, step: int, total: int) -> float:
    """Linear or half-cosine interpolation from ``v0`` (step 0) to ``v1`` (step ``total``)."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    if step < 0 or step > total:
        warnings.warn(f"schedule step {step} outside [0, {total}], clamped", RuntimeWarning, stacklevel=2)
        step = min(max(step, 0), total)
    if kind not in ("linear", "cosine"):
        raise ValueError(f"unknown schedule kind {kind!r}")
    if step == total:
        return v1
    if step == 0:
        return v0
    if kind == "linear":
        return v0 + (v1 - v0) * step / total
    return v1 + (v0 - v1) * (1 + math.cos(math.pi * step / total)) / 2


def lr_at(cfg: DinoConfig, step: int, total_steps: int) -> float:
    """Linear warmup over the first ``warmup_frac`` of steps, then cosine to ``min_lr``."""
    base = cfg.base_lr
    if cfg.constant_lr:
        return base
    warm = int(cfg.warmup_frac * total_steps)
    if step < warm:
        return base * (step + 1) / warm
    return schedule_value("cosine", base, cfg.min_lr, step - warm, max(1, total_steps - 1 - warm))


def wd_at(cfg: DinoConfig, step: int, total_steps: int) -> float:
    return schedule_value("cosine", cfg.wd_start, cfg.wd_end, step, max(1, total_steps - 1))


def momentum_at(cfg: DinoConfig, step: int, total_steps: int) -> float:
    return schedule_value("linear", cfg.momentum_start, cfg.momentum_end, step, max(1, total_steps - 1))


def teacher_temp_at(cfg: DinoConfig, epoch: int) -> float:
    if epoch < cfg.warmup_teacher_temp_epochs:
        return schedule_value("linear", cfg.warmup_teacher_temp, cfg.teacher_temp, epoch,
                              cfg.warmup_teacher_temp_epochs)
    return cfg.teacher_temp


# --- teacher bookkeeping ----------------------------------------------------

def teacher_ema_update(teacher: dict, student: dict, m: float) -> None:
    """theta_t <- m theta_t + (1 - m) theta_s, in place."""
    if set(teacher) != set(student):
        missing = sorted(set(teacher) ^ set(student))
        raise KeyError(f"teacher/student parameter names differ: {missing[:5]}")
    if not 0 <= m <= 1:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    for name, t in teacher.items():
        s = student[name].data
        if t.shape != s.shape:
            raise T.DimensionError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data *= t.data.dtype.type(m)
        t.data += t.data.dtype.type(1 - m) * s


def center_update(center: np.ndarray, teacher_logits: np.ndarray, m: float) -> np.ndarray:
    """Running mean of teacher outputs over all rows of the current batch."""
    batch_mean = np.asarray(teacher_logits, dtype=np.float64).mean(axis=0)
    out = m * np.asarray(center, dtype=np.float64) + (1 - m) * batch_mean
    return out.astype(np.asarray(center).dtype)


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, tau_t: float) -> np.ndarray:
    """Centered, sharpened teacher distribution (no gradient)."""
    z = (np.asarray(teacher_logits) - center) / tau_t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def collapse_fraction(teacher_logits: np.ndarray, center: np.ndarray) -> float:
    """Share of rows whose centered teacher argmax hits the most frequent output dimension."""
    idx = np.argmax(np.asarray(teacher_logits) - center, axis=-1)
    return float(np.bincount(idx).max() / idx.size)


# --- loss -------------------------------------------------------------------

def dino_loss_stacked(student: Tensor, teacher_logits: np.ndarray, center, tau_s: float, tau_t: float,
                      batch: int) -> Tensor:
    """Loss for view-major stacked logits: student (V*B) x K, teacher (G*B) x K.

    Teacher view g is paired with every student view v != g. Summing the
    teacher targets per student view turns the pair loop into one soft
    cross-entropy with unnormalized targets.
    """
    n_views = student.shape[0] // batch
    n_glob = teacher_logits.shape[0] // batch
    if n_views * batch != student.shape[0] or n_glob * batch != teacher_logits.shape[0]:
        raise T.DimensionError(f"logit rows {student.shape[0]}/{teacher_logits.shape[0]} not a multiple of batch {batch}")
    if n_views < 2:
        raise ValueError(f"need at least 2 views, got {n_views}")
    if n_glob > n_views:
        raise ValueError("more teacher views than student views")
    probs = teacher_probs(teacher_logits, center, tau_t).reshape(n_glob, batch, -1)
    total = probs.sum(axis=0)
    targets = np.empty((n_views, batch, probs.shape[-1]), dtype=probs.dtype)
    for v in range(n_views):
        targets[v] = total - probs[v] if v < n_glob else total
    pairs = n_glob * (n_views - 1)
    ce = T.cross_entropy_soft(student, targets.reshape(n_views * batch, -1).astype(student.data.dtype), tau_s)
    return T.mul(ce, n_views / pairs)


def dino_loss(student_views: list, teacher_views: list, center, tau_s: float, tau_t: float) -> Tensor:
    """Mean over ordered (teacher g, student v != g) pairs of the soft cross-entropy.

    ``student_views`` holds one B x K logit tensor per view (globals first),
    ``teacher_views`` one B x K array per global view.
    """
    if len(student_views) < 2:
        raise ValueError(f"need at least 2 views, got {len(student_views)}")
    b = student_views[0].shape[0]
    stacked = T.concat(list(student_views), axis=0)
    t = np.concatenate([np.asarray(getattr(x, "data", x)) for x in teacher_views], axis=0)
    return dino_loss_stacked(stacked, t, center, tau_s, tau_t, b)


# --- one optimization step --------------------------------------------------

def clip_grad_norm(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        sq += float(np.dot(p.grad.reshape(-1).astype(np.float64), p.grad.reshape(-1).astype(np.float64)))
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params.values():
            p.grad *= p.grad.dtype.type(scale)
    return norm


@dataclass
class StepStats:
    loss: float
    lr: float
    wd: float
    momentum: float
    grad_norm: float
    collapse: float


def train_step(state: DinoState, globals_: np.ndarray, locals_: np.ndarray, cfg: DinoConfig,
               total_steps: int) -> StepStats:
    """One student update, EMA teacher update and center update.

    ``globals_`` is 2 x B x C x G x G, ``locals_`` n x B x C x L x L.
    """
    vit, head = state.vit, state.head
    n_glob, b = globals_.shape[:2]
    g_flat = globals_.reshape(n_glob * b, *globals_.shape[2:])
    step = state.step
    lr = lr_at(cfg, step, total_steps)
    wd = wd_at(cfg, step, total_steps)
    mom = momentum_at(cfg, step, total_steps)
    tau_t = teacher_temp_at(cfg, state.epoch)

    t_logits = dino_head(vit_forward(g_flat, state.teacher, vit), state.teacher, head).data
    T.zero_grads(state.student)
    with T.Graph() as graph:
        outs = [dino_head(vit_forward(g_flat, state.student, vit), state.student, head)]
        if locals_.shape[0]:
            l_flat = locals_.reshape(locals_.shape[0] * b, *locals_.shape[2:])
            outs.append(dino_head(vit_forward(l_flat, state.student, vit), state.student, head))
        student = T.concat(outs, axis=0) if len(outs) > 1 else outs[0]
        loss = dino_loss_stacked(student, t_logits, state.center, cfg.student_temp, tau_t, b)
    loss_value = float(loss.data)
    if not math.isfinite(loss_value):
        raise TrainingError(f"non-finite loss {loss_value} at step {step}")
    T.backward(graph, loss)
    for name, t in state.teacher.items():
        if t.grad is not None or t.requires_grad:
            raise TrainingError(f"teacher parameter {name} acquired a gradient buffer")
    if state.epoch < cfg.freeze_last_layer_epochs:
        for name, p in state.student.items():
            if name.startswith("head.last."):
                p.grad.fill(0)
    norm = clip_grad_norm(state.student, cfg.grad_clip)
    no_decay = [n for n in state.student if is_no_decay(n)]
    T.adamw_step(state.student, None, state.opt, lr=lr, weight_decay=wd, no_decay=no_decay)
    teacher_ema_update(state.teacher, state.student, mom)
    collapse = collapse_fraction(t_logits, state.center)
    state.center = center_update(state.center, t_logits, cfg.center_momentum)
    state.step += 1
    return StepStats(loss_value, lr, wd, mom, norm, collapse)


# --- data order -------------------------------------------------------------

def epoch_batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle split into full batches (a single short batch when n < batch)."""
    perm = SplitMix(seed, tag_of("shuffle", epoch)).permutation(n)
    if n < batch:
        return [perm]
    return [perm[i * batch:(i + 1) * batch] for i in range(n // batch)]


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, n // batch)


def view_streams(seed: int, epoch: int, indices) -> list[SplitMix]:
    return [SplitMix(seed, tag_of("views", epoch, int(i))) for i in indices]


# --- pre-training loop ------------------------------------------------------

@dataclass
class PretrainResult:
    state: DinoState
    loss_csv: Path
    checkpoints: dict  # epoch -> path
    epoch_losses: list
    final_collapse: float


def pretrain(pixels: np.ndarray, cfg: DinoConfig, vit: ViTConfig, head: DinoHeadConfig, seed: int,
             out_dir, aug: AugmentConfig | None = None, state: DinoState | None = None) -> PretrainResult:
    """Run ``cfg.epochs`` epochs of self-distillation over uint8 patches (N x S x S x 3).

    Writes ``loss.csv`` and ``checkpoint_eXXXX.stnc`` files into ``out_dir``.
    Checkpoints are saved at ``cfg.checkpoint_epochs`` and always at the last
    epoch. A non-finite loss aborts training; the state before the failing
    step is saved as ``last_good.stnc``.
    """
    n = pixels.shape[0]
    if n == 0:
        raise ValueError("empty corpus")
    aug = aug or AugmentConfig.desk(global_size=vit.image_size, local_size=vit.image_size // 2)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = state or init_state(vit, head, cfg, seed)
    spe = steps_per_epoch(n, cfg.batch)
    total = spe * cfg.epochs
    save_at = set(cfg.checkpoint_epochs) | {cfg.epochs}
    csv_path = out / "loss.csv"
    checkpoints, epoch_losses = {}, []
    collapse = []
    with open(csv_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("step,epoch,loss,lr,wd,momentum\n")
        for epoch in range(state.epoch, cfg.epochs):
            state.epoch = epoch
            losses, collapse = [], []
            for idx in epoch_batches(n, cfg.batch, seed, epoch):
                g, loc = multi_crop_batch(pixels[idx], aug, view_streams(seed, epoch, idx))
                step = state.step
                try:
                    st = train_step(state, g, loc, cfg, total)
                except (TrainingError, T.OptimizerError) as exc:
                    save_checkpoint(out / "last_good.stnc", state)
                    raise TrainingError(f"aborted at step {step}: {exc}; last good state in {out / 'last_good.stnc'}") from exc
                losses.append(st.loss)
                collapse.append(st.collapse)
                fh.write(f"{step},{epoch + 1},{st.loss:.6f},{st.lr:.6e},{st.wd:.6f},{st.momentum:.6f}\n")
            fh.flush()
            epoch_losses.append(float(np.mean(losses)))
            state.epoch = epoch + 1
            log.info("epoch %d loss %.4f collapse %.3f", epoch + 1, epoch_losses[-1], float(np.mean(collapse)))
            if epoch + 1 in save_at:
                path = out / f"checkpoint_e{epoch + 1:04d}.stnc"
                save_checkpoint(path, state)
                checkpoints[epoch + 1] = path
    return PretrainResult(state, csv_path, checkpoints, epoch_losses, float(np.mean(collapse)) if collapse else float("nan"))


def read_loss_csv(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            vals = line.strip().split(",")
            rows.append({k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in zip(header, vals)})
    return rows


def epoch_mean_losses(rows: list[dict]) -> dict:
    acc: dict = {}
    for r in rows:
        acc.setdefault(r["epoch"], []).append(r["loss"])
    return {e: float(np.mean(v)) for e, v in sorted(acc.items())}


# --- checkpoint format ------------------------------------------------------

def _vit_meta(v: ViTConfig) -> np.ndarray:
    return np.array([v.image_size, v.patch_size, v.embed_dim, v.depth, v.heads, v.mlp_ratio, v.channels,
                     v.ln_eps], dtype=np.float32)


def _head_meta(h: DinoHeadConfig) -> np.ndarray:
    return np.array([h.hidden, h.bottleneck, h.out_dim, float(h.norm_last_layer)], dtype=np.float32)


def checkpoint_entries(state: DinoState) -> list[tuple[str, np.ndarray]]:
    entries = [("meta/vit", _vit_meta(state.vit)), ("meta/head", _head_meta(state.head))]
    for prefix, params in (("student/", state.student), ("teacher/", state.teacher)):
        entries += [(prefix + k, t.data) for k, t in params.items()]
    for prefix, moments in (("adam_m/", state.opt.m), ("adam_v/", state.opt.v)):
        entries += [(prefix + k, a) for k, a in moments.items()]
    return entries


def checkpoint_size(entries, k: int) -> int:
    """Byte count: header + per-entry overhead and payload + center + clocks."""
    size = 12
    for name, a in entries:
        size += 2 + len(name.encode("utf-8")) + 1 + 4 * np.ndim(a) + 4 * int(np.size(a))
    return size + 4 + 4 * k + 16


def save_checkpoint(path, state: DinoState) -> None:
    entries = checkpoint_entries(state)
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, a in entries:
        nb = name.encode("utf-8")
        a = np.asarray(a)
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    c = np.asarray(state.center, dtype="<f4")
    parts.append(struct.pack("<I", c.size) + c.tobytes())
    parts.append(struct.pack("<QII", state.step, state.epoch, state.opt.t))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path, cfg: DinoConfig | None = None) -> DinoState:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not a checkpoint file", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    entries = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        at = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("entry name is not UTF-8", at) from None
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "dims") if ndim else ()
        numel = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * numel, f"data of {name}"), dtype="<f4").astype(np.float32).reshape(shape)
        entries[name] = data
    (k,) = r.unpack("<I", "center length")
    center = np.frombuffer(r.take(4 * k, "center"), dtype="<f4").astype(np.float32)
    step, epoch, t = r.unpack("<QII", "clocks")
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after clocks", r.pos)
    for key in ("meta/vit", "meta/head"):
        if key not in entries:
            raise CheckpointFormatError(f"missing {key} entry", 12)
    mv = entries.pop("meta/vit")
    vit = ViTConfig(*(int(x) for x in mv[:7]), ln_eps=float(f"{float(mv[7]):.6g}"))
    mh = entries.pop("meta/head")
    head = DinoHeadConfig(int(mh[0]), int(mh[1]), int(mh[2]), norm_last_layer=bool(mh[3]))
    groups: dict = {"student/": {}, "teacher/": {}, "adam_m/": {}, "adam_v/": {}}
    for name, a in entries.items():
        prefix = name[:name.index("/") + 1] if "/" in name else ""
        if prefix not in groups:
            raise CheckpointFormatError(f"unknown entry {name!r}", 12)
        groups[prefix][name[len(prefix):]] = a
    with T.precision("float32"):
        student = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in groups["student/"].items()}
        teacher = {n: Tensor(a.copy(), requires_grad=False, name=n) for n, a in groups["teacher/"].items()}
    cfg = cfg or DinoConfig()
    opt = AdamWState(lr=cfg.base_lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps,
                     weight_decay=cfg.wd_start, t=t,
                     m={n: a.copy() for n, a in groups["adam_m/"].items()},
                     v={n: a.copy() for n, a in groups["adam_v/"].items()})
    return DinoState(student, teacher, center, opt, step=step, epoch=epoch, vit=vit, head=head)

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stainssl import dino as D
from stainssl import tensor as T
from stainssl.augment import AugmentConfig
from stainssl.encoder import DinoHeadConfig, ViTConfig
from stainssl.rng import SplitMix

TINY = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
TINY_HEAD = DinoHeadConfig(hidden=16, bottleneck=8, out_dim=12)
TINY_AUG = AugmentConfig.desk(global_size=16, local_size=8, n_local=2)


def _params(**vals):
    return {k: T.parameter(np.asarray(v, dtype=np.float64)) for k, v in vals.items()}


# --- schedules --------------------------------------------------------------

def test_schedule_vectors():
    assert D.schedule_value("linear", 0.9995, 1.0, 0, 100) == 0.9995
    assert D.schedule_value("linear", 0.9995, 1.0, 100, 100) == 1.0
    assert D.schedule_value("cosine", 0.04, 0.4, 50, 100) == pytest.approx(0.22, abs=1e-15)
    with pytest.warns(RuntimeWarning):
        assert D.schedule_value("cosine", 0.04, 0.4, 120, 100) == 0.4
    with pytest.raises(ValueError):
        D.schedule_value("step", 0, 1, 0, 10)


def test_schedules_hit_endpoints_exactly():
    cfg = D.DinoConfig(epochs=3)
    total = 3 * 7
    assert D.momentum_at(cfg, 0, total) == 0.9995 and D.momentum_at(cfg, total - 1, total) == 1.0
    assert D.wd_at(cfg, 0, total) == 0.04 and D.wd_at(cfg, total - 1, total) == 0.4
    moms = [D.momentum_at(cfg, s, total) for s in range(total)]
    assert all(b >= a for a, b in zip(moms, moms[1:]))
    np.testing.assert_allclose(np.diff(moms), 0.0005 / (total - 1), rtol=1e-6)


def test_lr_warmup_and_cosine():
    cfg = D.DinoConfig(epochs=10, lr=5e-4, batch=64, lr_ref_batch=256, warmup_frac=0.1, min_lr=1e-6)
    assert cfg.base_lr == pytest.approx(1.25e-4)
    total = 100
    lrs = [D.lr_at(cfg, s, total) for s in range(total)]
    assert lrs[9] == pytest.approx(cfg.base_lr) and lrs[0] == pytest.approx(cfg.base_lr / 10)
    assert lrs[-1] == 1e-6 and max(lrs) == pytest.approx(cfg.base_lr)
    assert D.lr_at(D.DinoConfig(constant_lr=True), 50, 100) == 5e-4


def test_config_validation():
    with pytest.raises(ValueError):
        D.DinoConfig(teacher_temp=0.2)
    with pytest.raises(ValueError):
        D.DinoConfig(momentum_start=1.0, momentum_end=0.99)


# --- teacher bookkeeping ----------------------------------------------------

def test_ema_vectors():
    s = _params(w=[2.0, 4.0])
    t = _params(w=[0.0, 0.0])
    D.teacher_ema_update(t, s, 1.0)
    assert t["w"].data.tolist() == [0.0, 0.0]
    D.teacher_ema_update(t, s, 0.5)
    assert t["w"].data.tolist() == [1.0, 2.0]
    D.teacher_ema_update(t, s, 0.0)
    assert t["w"].data.tolist() == [2.0, 4.0]
    with pytest.raises(KeyError):
        D.teacher_ema_update(_params(v=[0.0]), s, 0.5)


def test_center_vectors():
    c = np.zeros(3)
    np.testing.assert_allclose(D.center_update(c, np.ones((4, 3)), 0.9), 0.1)
    logits = np.random.default_rng(0).normal(size=(5, 3))
    m = logits.mean(0)
    np.testing.assert_allclose(D.center_update(m, logits, 0.9), m, atol=1e-15)
    np.testing.assert_allclose(D.center_update(c, logits, 0.0), m)


def test_collapse_fraction():
    logits = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    assert D.collapse_fraction(logits, np.zeros(3)) == 0.5
    assert D.collapse_fraction(logits, np.array([2.0, 0, 0])) == 0.75  # centering moves argmax


# --- loss -------------------------------------------------------------------

def brute_dino_loss(students, teachers, c, tau_s, tau_t):
    """Average over ordered (g, v != g) pairs of the soft cross-entropy, in float64."""
    total, pairs = 0.0, 0
    for g, t in enumerate(teachers):
        p = np.exp((t - c) / tau_t - ((t - c) / tau_t).max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        for v, s in enumerate(students):
            if v == g:
                continue
            z = s / tau_s
            logp = z - z.max(1, keepdims=True)
            logp -= np.log(np.exp(logp).sum(1, keepdims=True))
            total += -(p * logp).sum(1).mean()
            pairs += 1
    return total / pairs


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(2, 9), st.integers(0, 10**6))
def test_loss_matches_pair_loop(n_views, b, k, seed):
    r = np.random.default_rng(seed)
    students = [r.normal(size=(b, k)) for _ in range(n_views)]
    teachers = [r.normal(size=(b, k)) for _ in range(min(2, n_views))]
    c = r.normal(size=k) * 0.1
    with T.precision("float64"):
        got = float(D.dino_loss([T.tensor(s) for s in students], teachers, c, 0.1, 0.04).data)
    assert got == pytest.approx(brute_dino_loss(students, teachers, c, 0.1, 0.04), rel=1e-10)


def test_loss_uniform_and_one_hot_limits():
    k = 7
    z = np.zeros((3, k))
    with T.precision("float64"):
        assert float(D.dino_loss([T.tensor(z), T.tensor(z)], [z, z], np.zeros(k), 0.1, 0.04).data) == pytest.approx(math.log(k))
        s = np.array([[math.log(3.0), 0.0]])
        t = np.array([[1e3, 0.0]])
        val = float(D.dino_loss([T.tensor(s), T.tensor(s)], [t], np.zeros(2), 1.0, 1.0).data)
    assert val == pytest.approx(-math.log(0.75), abs=1e-12)
    with pytest.raises(ValueError):
        D.dino_loss([T.tensor(z)], [z], np.zeros(k), 0.1, 0.04)


def test_loss_gradient_finite_differences():
    r = np.random.default_rng(1)
    views = [T.parameter(r.normal(size=(2, 5))) for _ in range(4)]
    teachers = [r.normal(size=(2, 5)) for _ in range(2)]
    c = r.normal(size=5) * 0.1
    rep = T.grad_check(lambda: D.dino_loss(views, teachers, c, 0.1, 0.04), views, h=1e-4, tol=1e-3)
    assert rep.passed, rep.worst


def test_clip_grad_norm():
    p = _params(a=[0.0, 0.0], b=[0.0])
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([4.0])
    assert D.clip_grad_norm(p, 1.0) == pytest.approx(5.0)
    assert np.sqrt(sum((q.grad ** 2).sum() for q in p.values())) == pytest.approx(1.0)
    p["a"].grad = np.array([0.3, 0.0])
    p["b"].grad = np.array([0.4])
    D.clip_grad_norm(p, 1.0)
    assert p["a"].grad.tolist() == [0.3, 0.0]


# --- training ---------------------------------------------------------------

def _pixels(n=8, size=32, seed=0):
    return (SplitMix(seed).random(n * size * size * 3) * 256).astype(np.uint8).reshape(n, size, size, 3)


def _views(pixels, seed=0):
    from stainssl.augment import multi_crop_batch
    return multi_crop_batch(pixels, TINY_AUG, D.view_streams(seed, 0, range(len(pixels))))


def test_train_step_contracts():
    cfg = D.DinoConfig(epochs=1, batch=4)
    state = D.init_state(TINY, TINY_HEAD, cfg, 0)
    teacher0 = {k: v.data.copy() for k, v in state.teacher.items()}
    g, loc = _views(_pixels(4))
    st_ = D.train_step(state, g, loc, cfg, total_steps=10)
    assert math.isfinite(st_.loss) and state.step == 1
    assert all(t.grad is None and not t.requires_grad for t in state.teacher.values())
    assert np.isfinite(state.center).all() and np.any(state.center != 0)
    moved = [k for k in teacher0 if not np.array_equal(teacher0[k], state.teacher[k].data)]
    assert moved  # momentum < 1 on the first step


def test_momentum_one_freezes_teacher():
    cfg = D.DinoConfig(epochs=1, batch=4, momentum_start=1.0)
    state = D.init_state(TINY, TINY_HEAD, cfg, 0)
    before = {k: v.data.copy() for k, v in state.teacher.items()}
    g, loc = _views(_pixels(4))
    D.train_step(state, g, loc, cfg, total_steps=3)
    assert all(np.array_equal(before[k], state.teacher[k].data) for k in before)


def test_frozen_last_layer():
    cfg = D.DinoConfig(epochs=2, batch=4, freeze_last_layer_epochs=1, wd_start=0.0, wd_end=0.0)
    state = D.init_state(TINY, TINY_HEAD, cfg, 0)
    w0 = state.student["head.last.weight_v"].data.copy()
    g, loc = _views(_pixels(4))
    D.train_step(state, g, loc, cfg, total_steps=4)
    assert np.array_equal(w0, state.student["head.last.weight_v"].data)


def test_step_determinism():
    out = []
    for _ in range(2):
        cfg = D.DinoConfig(epochs=1, batch=4)
        state = D.init_state(TINY, TINY_HEAD, cfg, 5)
        g, loc = _views(_pixels(4), seed=5)
        T.set_deterministic(True)
        try:
            out.append(D.train_step(state, g, loc, cfg, 5).loss)
        finally:
            T.set_deterministic(False)
    assert out[0] == out[1]


def test_epoch_batches():
    bs = D.epoch_batches(10, 4, 0, 0)
    assert [len(b) for b in bs] == [4, 4]
    assert len(set(np.concatenate(bs).tolist())) == 8
    assert [len(b) for b in D.epoch_batches(3, 4, 0, 0)] == [3]
    assert not np.array_equal(np.concatenate(D.epoch_batches(10, 4, 0, 0)), np.concatenate(D.epoch_batches(10, 4, 0, 1)))


def test_pretrain_outputs(tmp_path):
    cfg = D.DinoConfig(epochs=2, batch=4, checkpoint_epochs=(1,))
    res = D.pretrain(_pixels(8), cfg, TINY, TINY_HEAD, 0, tmp_path, aug=TINY_AUG)
    rows = D.read_loss_csv(res.loss_csv)
    assert len(rows) == 4 and [r["epoch"] for r in rows] == [1, 1, 2, 2]
    assert sorted(res.checkpoints) == [1, 2]
    assert list(D.epoch_mean_losses(rows).values()) == pytest.approx(res.epoch_losses)
    assert rows[-1]["momentum"] == 1.0
    st_ = D.load_checkpoint(res.checkpoints[2])
    assert st_.step == 4 and st_.epoch == 2


def test_pretrain_resume_matches_uninterrupted(tmp_path):
    cfg = D.DinoConfig(epochs=2, batch=4, checkpoint_epochs=(1,))
    full = D.pretrain(_pixels(8), cfg, TINY, TINY_HEAD, 0, tmp_path / "a", aug=TINY_AUG)
    mid = D.load_checkpoint(full.checkpoints[1])
    resumed = D.pretrain(_pixels(8), cfg, TINY, TINY_HEAD, 0, tmp_path / "b", aug=TINY_AUG, state=mid)
    assert resumed.state.step == full.state.step
    for k, t in full.state.teacher.items():
        assert np.array_equal(t.data, resumed.state.teacher[k].data)


def test_nan_aborts_with_last_good(tmp_path, monkeypatch):
    def bad(*a, **k):
        return T.tensor(np.array(np.nan))

    monkeypatch.setattr(D, "dino_loss_stacked", bad)
    with pytest.raises(D.TrainingError):
        D.pretrain(_pixels(4), D.DinoConfig(epochs=1, batch=4), TINY, TINY_HEAD, 0, tmp_path, aug=TINY_AUG)
    assert D.load_checkpoint(tmp_path / "last_good.stnc").step == 0


# --- checkpoint format ------------------------------------------------------

def _trained_state():
    cfg = D.DinoConfig(epochs=1, batch=4)
    state = D.init_state(TINY, TINY_HEAD, cfg, 1)
    g, loc = _views(_pixels(4))
    D.train_step(state, g, loc, cfg, 3)
    return state


def test_checkpoint_round_trip(tmp_path):
    state = _trained_state()
    path = tmp_path / "c.stnc"
    D.save_checkpoint(path, state)
    assert path.stat().st_size == D.checkpoint_size(D.checkpoint_entries(state), TINY_HEAD.out_dim)
    back = D.load_checkpoint(path)
    assert back.vit == TINY and back.head == TINY_HEAD
    assert back.step == state.step and back.epoch == state.epoch and back.opt.t == state.opt.t
    for group in ("student", "teacher"):
        a, b = getattr(state, group), getattr(back, group)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert all(state.opt.m[k].tobytes() == back.opt.m[k].tobytes() for k in state.opt.m)
    assert back.center.tobytes() == np.asarray(state.center, np.float32).tobytes()
    D.save_checkpoint(tmp_path / "d.stnc", back)
    assert (tmp_path / "d.stnc").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    state = _trained_state()
    path = tmp_path / "c.stnc"
    D.save_checkpoint(path, state)
    buf = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(D.CheckpointFormatError) as e:
        D.load_checkpoint(tmp_path / "bad")
    assert e.value.offset == 0
    (tmp_path / "short").write_bytes(buf[:len(buf) // 2])
    with pytest.raises(D.CheckpointFormatError, match="truncated"):
        D.load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(buf + b"\0")
    with pytest.raises(D.CheckpointFormatError, match="trailing"):
        D.load_checkpoint(tmp_path / "long")
    (tmp_path / "ver").write_bytes(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
    with pytest.raises(D.CheckpointFormatError) as e:
        D.load_checkpoint(tmp_path / "ver")
    assert e.value.offset == 4

"""Small vision transformer backbone and the self-distillation projection head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import SplitMix
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 4
    channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid ** 2 + 1

    @classmethod
    def preset(cls, name: str) -> "ViTConfig":
        return {
            "vit-micro": cls(64, 8, 64, 3, 4),
            "vit-small": cls(224, 16, 384, 12, 6),
            "vit-base": cls(224, 16, 768, 12, 12),
        }[name]


@dataclass(frozen=True)
class DinoHeadConfig:
    hidden: int = 256
    bottleneck: int = 64
    out_dim: int = 1024
    use_bn: bool = False
    norm_last_layer: bool = True

    def __post_init__(self):
        if self.out_dim < 2:
            raise ValueError("out_dim must be >= 2")
        if self.use_bn:
            raise ValueError("batch-normalized heads are not supported (use_bn must be false)")

    @classmethod
    def paper(cls) -> "DinoHeadConfig":
        return cls(hidden=2048, bottleneck=256, out_dim=65536)


ParameterSet = dict  # name -> Tensor


def init_backbone(cfg: ViTConfig, rng: SplitMix) -> ParameterSet:
    d, hid = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    pdim = cfg.channels * cfg.patch_size ** 2

    def w(*shape):
        return T.parameter(rng.truncated_normal(int(np.prod(shape)), 0.02).reshape(shape))

    def zeros(*shape):
        return T.parameter(np.zeros(shape))

    def ones(*shape):
        return T.parameter(np.ones(shape))

    p = {
        "patch_embed.weight": w(pdim, d),
        "patch_embed.bias": zeros(d),
        "cls_token": w(1, d),
        "pos_embed": w(cfg.tokens, d),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "norm1.gamma"] = ones(d)
        p[b + "norm1.beta"] = zeros(d)
        p[b + "attn.qkv.weight"] = w(d, 3 * d)
        p[b + "attn.qkv.bias"] = zeros(3 * d)
        p[b + "attn.proj.weight"] = w(d, d)
        p[b + "attn.proj.bias"] = zeros(d)
        p[b + "norm2.gamma"] = ones(d)
        p[b + "norm2.beta"] = zeros(d)
        p[b + "mlp.fc1.weight"] = w(d, hid)
        p[b + "mlp.fc1.bias"] = zeros(hid)
        p[b + "mlp.fc2.weight"] = w(hid, d)
        p[b + "mlp.fc2.bias"] = zeros(d)
    p["norm.gamma"] = ones(d)
    p["norm.beta"] = zeros(d)
    for name, t in p.items():
        t.name = name
    return p


def init_head(embed_dim: int, cfg: DinoHeadConfig, rng: SplitMix) -> ParameterSet:
    def w(*shape):
        return T.parameter(rng.truncated_normal(int(np.prod(shape)), 0.02).reshape(shape))

    p = {
        "head.fc1.weight": w(embed_dim, cfg.hidden),
        "head.fc1.bias": T.parameter(np.zeros(cfg.hidden)),
        "head.fc2.weight": w(cfg.hidden, cfg.hidden),
        "head.fc2.bias": T.parameter(np.zeros(cfg.hidden)),
        "head.fc3.weight": w(cfg.hidden, cfg.bottleneck),
        "head.fc3.bias": T.parameter(np.zeros(cfg.bottleneck)),
        "head.last.weight_v": w(cfg.out_dim, cfg.bottleneck),
    }
    if not cfg.norm_last_layer:
        p["head.last.weight_g"] = T.parameter(np.ones((cfg.out_dim, 1)))
    for name, t in p.items():
        t.name = name
    return p


def init_params(vit: ViTConfig, head: DinoHeadConfig, seed: int) -> ParameterSet:
    rng = SplitMix(seed, 0x5EED)
    p = init_backbone(vit, rng.child("backbone"))
    p.update(init_head(vit.embed_dim, head, rng.child("head")))
    return p


def is_no_decay(name: str) -> bool:
    """Biases, LayerNorm parameters and the token/position tables skip weight decay."""
    return (name.endswith(".bias") or name.endswith(".gamma") or name.endswith(".beta")
            or name in ("cls_token", "pos_embed") or name.endswith("weight_g"))


def clone_params(params: ParameterSet, requires_grad: bool) -> ParameterSet:
    out = {}
    for name, t in params.items():
        c = Tensor(t.data.copy(), requires_grad=requires_grad, name=name)
        out[name] = c
    return out


# --- tokenization -----------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x C x S x S -> B x (S/p)^2 x (C p p), channel-major within a patch."""
    b, c, h, w = images.shape
    if h != w or h % patch:
        raise DimensionError(f"image {h}x{w} is not divisible into {patch}px patches")
    g = h // patch
    x = images.reshape(b, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, g * g, c * patch * patch)


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """dst x src matrix of 1-D half-pixel bilinear weights with edge clamping."""
    m = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x = min(max(x, 0.0), src - 1.0)
        i0 = int(np.floor(x))
        i1 = min(i0 + 1, src - 1)
        f = x - i0
        m[i, i0] += 1 - f
        m[i, i1] += f
    return m


_interp_cache: dict = {}


def interpolate_pos_embed(table, grid_from: int, grid_to: int) -> Tensor:
    """Resample the spatial part of a (1 + G*G) x d table to a g x g grid.

    The CLS row is copied through; the spatial rows are bilinearly resampled.
    Differentiable with respect to ``table``.
    """
    table = table if isinstance(table, Tensor) else T.tensor(table)
    if table.shape[0] != grid_from ** 2 + 1:
        raise DimensionError(f"table has {table.shape[0]} rows, expected {grid_from ** 2 + 1}")
    if grid_to == grid_from:
        return table
    key = (grid_from, grid_to, table.data.dtype)
    mat = _interp_cache.get(key)
    if mat is None:
        m1 = bilinear_matrix(grid_from, grid_to)
        mat = _interp_cache[key] = np.kron(m1, m1).astype(table.data.dtype)
    spatial = T.matmul(mat, table[1:])
    return T.concat([table[0:1], spatial], axis=0)


def patch_embed(images: np.ndarray, params: ParameterSet, cfg: ViTConfig) -> Tensor:
    """Patch tokens with a prepended CLS token and positional embeddings."""
    if images.ndim != 4 or images.shape[1] != cfg.channels:
        raise DimensionError(f"expected B x {cfg.channels} x S x S images, got {images.shape}")
    patches = patchify(np.asarray(images, dtype=T.default_dtype()), cfg.patch_size)
    b, n, _ = patches.shape
    x = T.linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.add(np.zeros((b, 1, cfg.embed_dim), dtype=x.data.dtype), params["cls_token"])
    x = T.concat([cls, x], axis=1)
    g = int(round(n ** 0.5))
    pos = interpolate_pos_embed(params["pos_embed"], cfg.grid, g)
    return T.add(x, pos)


# --- transformer ------------------------------------------------------------

def attention(x: Tensor, params: ParameterSet, prefix: str, heads: int, store: list | None = None) -> Tensor:
    qkv = T.linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    out = T.multihead_attention(qkv, heads, store)
    return T.linear(out, params[prefix + "proj.weight"], params[prefix + "proj.bias"])


def block(x: Tensor, params: ParameterSet, i: int, cfg: ViTConfig, store: list | None = None) -> Tensor:
    b = f"blocks.{i}."
    h = T.layer_norm(x, params[b + "norm1.gamma"], params[b + "norm1.beta"], cfg.ln_eps)
    x = x + attention(h, params, b + "attn.", cfg.heads, store)
    h = T.layer_norm(x, params[b + "norm2.gamma"], params[b + "norm2.beta"], cfg.ln_eps)
    h = T.linear(h, params[b + "mlp.fc1.weight"], params[b + "mlp.fc1.bias"])
    h = T.activation(h, "gelu")
    h = T.linear(h, params[b + "mlp.fc2.weight"], params[b + "mlp.fc2.bias"])
    return x + h


def vit_forward(views: np.ndarray, params: ParameterSet, cfg: ViTConfig,
                attention_store: list | None = None) -> Tensor:
    """CLS embeddings (B x d) for a batch of same-sized views (B x C x S x S)."""
    x = patch_embed(views, params, cfg)
    for i in range(cfg.depth):
        x = block(x, params, i, cfg, attention_store)
    x = T.layer_norm(x, params["norm.gamma"], params["norm.beta"], cfg.ln_eps)
    return x[:, 0]


def last_layer_weight(params: ParameterSet) -> Tensor:
    """Effective last-layer weight (K x bottleneck) with unit-norm rows (times the gain if learnable)."""
    w = T.l2_normalize(params["head.last.weight_v"], axis=1)
    g = params.get("head.last.weight_g")
    return w if g is None else w * g


def dino_head(cls: Tensor, params: ParameterSet, cfg: DinoHeadConfig, bottleneck_store: list | None = None) -> Tensor:
    h = T.activation(T.linear(cls, params["head.fc1.weight"], params["head.fc1.bias"]), "gelu")
    h = T.activation(T.linear(h, params["head.fc2.weight"], params["head.fc2.bias"]), "gelu")
    h = T.linear(h, params["head.fc3.weight"], params["head.fc3.bias"])
    h = T.l2_normalize(h, axis=-1)
    if bottleneck_store is not None:
        bottleneck_store.append(h.data)
    return T.matmul(h, T.transpose(last_layer_weight(params)))

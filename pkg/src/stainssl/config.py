"""Flat ``key = value`` configuration with typed defaults and their provenance."""

from __future__ import annotations

from dataclasses import dataclass

from .augment import AugmentConfig
from .corpus import CorpusConfig
from .dino import DinoConfig
from .downstream import MILConfig, ProbeConfig
from .encoder import DinoHeadConfig, ViTConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Key:
    name: str
    type: str  # int, float, bool, str, ints, floats
    default: object
    source: str  # "published", "desk" or "choice"


PUBLISHED, DESK, CHOICE = "published", "desk", "choice"

KEYS = [
    Key("corpus.classes", "int", 4, DESK),
    Key("corpus.slides_per_class", "int", 50, DESK),
    Key("corpus.slide_size", "int", 1120, DESK),
    Key("corpus.patch_size", "int", 224, PUBLISHED),
    Key("corpus.cap", "int", 25, DESK),
    Key("corpus.keep_frac", "float", 0.25, CHOICE),
    Key("augment.global_size", "int", 64, DESK),
    Key("augment.local_size", "int", 32, DESK),
    Key("augment.n_local", "int", 8, PUBLISHED),
    Key("augment.global_scale", "floats", (0.4, 1.0), PUBLISHED),
    Key("augment.local_scale", "floats", (0.05, 0.4), PUBLISHED),
    Key("augment.hflip_p", "float", 0.5, PUBLISHED),
    Key("augment.vflip_p", "float", 0.0, PUBLISHED),
    Key("augment.grayscale_p", "float", 0.2, PUBLISHED),
    Key("augment.brightness", "float", 0.8, PUBLISHED),
    Key("augment.contrast", "float", 0.8, PUBLISHED),
    Key("augment.saturation", "float", 0.4, PUBLISHED),
    Key("augment.hue", "float", 0.2, PUBLISHED),
    Key("augment.jitter_p", "float", 0.8, PUBLISHED),
    Key("augment.jitter_strength", "float", 0.5, PUBLISHED),
    Key("augment.blur_sigma", "floats", (0.1, 2.0), PUBLISHED),
    Key("augment.global_blur_p", "floats", (1.0, 0.1), PUBLISHED),
    Key("augment.local_blur_p", "float", 0.5, PUBLISHED),
    Key("augment.global_solarize_p", "floats", (0.0, 0.2), PUBLISHED),
    Key("augment.solarize_threshold", "float", 0.5, CHOICE),
    Key("augment.mean", "floats", (0.5, 0.5, 0.5), PUBLISHED),
    Key("augment.std", "floats", (0.5, 0.5, 0.5), PUBLISHED),
    Key("vit.image_size", "int", 64, DESK),
    Key("vit.patch_size", "int", 8, DESK),
    Key("vit.embed_dim", "int", 64, DESK),
    Key("vit.depth", "int", 3, DESK),
    Key("vit.heads", "int", 4, DESK),
    Key("vit.mlp_ratio", "int", 4, CHOICE),
    Key("head.hidden", "int", 256, DESK),
    Key("head.bottleneck", "int", 64, DESK),
    Key("head.out_dim", "int", 1024, DESK),
    Key("head.norm_last_layer", "bool", True, PUBLISHED),
    Key("dino.epochs", "int", 100, PUBLISHED),
    Key("dino.batch", "int", 64, DESK),
    Key("dino.lr", "float", 5e-4, PUBLISHED),
    Key("dino.betas", "floats", (0.9, 0.999), PUBLISHED),
    Key("dino.eps", "float", 1e-8, CHOICE),
    Key("dino.wd_start", "float", 0.04, PUBLISHED),
    Key("dino.wd_end", "float", 0.4, PUBLISHED),
    Key("dino.momentum_start", "float", 0.9995, PUBLISHED),
    Key("dino.momentum_end", "float", 1.0, PUBLISHED),
    Key("dino.teacher_temp", "float", 0.04, PUBLISHED),
    Key("dino.student_temp", "float", 0.1, PUBLISHED),
    Key("dino.center_momentum", "float", 0.9, PUBLISHED),
    Key("dino.warmup_teacher_temp", "float", 0.04, PUBLISHED),
    Key("dino.warmup_teacher_temp_epochs", "int", 0, PUBLISHED),
    Key("dino.freeze_last_layer_epochs", "int", 0, PUBLISHED),
    Key("dino.grad_clip", "float", 3.0, CHOICE),
    Key("dino.warmup_frac", "float", 0.05, CHOICE),
    Key("dino.min_lr", "float", 1e-6, CHOICE),
    Key("dino.constant_lr", "bool", False, CHOICE),
    Key("dino.lr_ref_batch", "int", 0, CHOICE),
    Key("dino.checkpoint_epochs", "ints", (), CHOICE),
    Key("probe.mode", "str", "linear", PUBLISHED),
    Key("probe.hidden", "int", 0, CHOICE),
    Key("probe.epochs", "int", 20, PUBLISHED),
    Key("probe.batch", "int", 128, PUBLISHED),
    Key("probe.lr", "float", 1e-4, PUBLISHED),
    Key("probe.wd", "float", 1e-4, PUBLISHED),
    Key("probe.patience", "int", 5, PUBLISHED),
    Key("mil.epochs", "int", 20, PUBLISHED),
    Key("mil.lr", "float", 1e-4, PUBLISHED),
    Key("mil.wd", "float", 1e-4, PUBLISHED),
    Key("mil.patience", "int", 5, PUBLISHED),
    Key("mil.attn_dim", "int", 128, CHOICE),
    Key("mil.hidden", "int", 0, CHOICE),
    Key("eval.folds", "int", 5, PUBLISHED),
    Key("eval.split", "floats", (0.5, 0.2, 0.3), PUBLISHED),
    Key("eval.few_ratios", "floats", (0.1, 0.25, 0.5, 0.75, 1.0), CHOICE),
    Key("eval.retrieval_k", "int", 20, PUBLISHED),
    Key("eval.caps", "ints", (10, 25), DESK),
]
KEY_INDEX = {k.name: k for k in KEYS}


def _parse_value(key: Key, text: str, line: int):
    text = text.strip()
    try:
        if key.type == "int":
            return int(text)
        if key.type == "float":
            return float(text)
        if key.type == "bool":
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if key.type == "str":
            return text
        if key.type in ("ints", "floats"):
            conv = int if key.type == "ints" else float
            return tuple(conv(p) for p in text.split(",") if p.strip()) if text else ()
    except ValueError:
        raise ConfigError(f"{key.name} expects {key.type}, got {text!r}", line) from None
    raise AssertionError(key.type)


def _format_value(key: Key, value) -> str:
    if key.type == "bool":
        return "true" if value else "false"
    if key.type in ("ints", "floats"):
        return ",".join(repr(v) for v in value)
    return repr(value) if key.type == "float" else str(value)


class Config:
    """Typed values for every known key; ``lines`` remembers where overrides came from."""

    def __init__(self, values: dict | None = None, lines: dict | None = None):
        self.values = {k.name: k.default for k in KEYS}
        self.lines = dict(lines or {})
        for name, v in (values or {}).items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown key {name!r}", self.lines.get(name))
            self.values[name] = v
        self._check()

    def __getitem__(self, name):
        return self.values[name]

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values

    def section(self, prefix: str) -> dict:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def _line_of(self, *names):
        for n in names:
            if n in self.lines:
                return self.lines[n]
        return None

    def _check(self) -> None:
        v = self.values
        if v["vit.image_size"] % v["vit.patch_size"]:
            raise ConfigError(f"vit.image_size {v['vit.image_size']} is not divisible by vit.patch_size "
                              f"{v['vit.patch_size']}", self._line_of("vit.image_size", "vit.patch_size"))
        if v["vit.embed_dim"] % v["vit.heads"]:
            raise ConfigError(f"vit.embed_dim {v['vit.embed_dim']} is not divisible by vit.heads {v['vit.heads']}",
                              self._line_of("vit.embed_dim", "vit.heads"))
        if v["augment.global_size"] % v["vit.patch_size"] or v["augment.local_size"] % v["vit.patch_size"]:
            raise ConfigError("augment view sizes must be multiples of vit.patch_size",
                              self._line_of("augment.global_size", "augment.local_size", "vit.patch_size"))
        for section, build in (("corpus", self.corpus), ("augment", self.augment), ("vit", self.vit),
                               ("head", self.head), ("dino", self.dino), ("probe", self.probe), ("mil", self.mil)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                keys = [k for k in self.lines if k.startswith(section + ".")]
                raise ConfigError(f"{section}: {exc}", self._line_of(*keys)) from None
        if len(v["eval.split"]) != 3:
            raise ConfigError("eval.split needs three ratios", self._line_of("eval.split"))

    # builders
    def corpus(self) -> CorpusConfig:
        return CorpusConfig(**self.section("corpus"))

    def augment(self) -> AugmentConfig:
        return AugmentConfig(**self.section("augment"))

    def vit(self) -> ViTConfig:
        return ViTConfig(**self.section("vit"))

    def head(self) -> DinoHeadConfig:
        return DinoHeadConfig(**self.section("head"))

    def dino(self) -> DinoConfig:
        return DinoConfig(**self.section("dino"))

    def probe(self, seed: int = 0) -> ProbeConfig:
        return ProbeConfig(**self.section("probe"), seed=seed)

    def mil(self, seed: int = 0) -> MILConfig:
        return MILConfig(**self.section("mil"), seed=seed)


def parse_config_text(text: str) -> Config:
    values, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        name, value = (s.strip() for s in line.split("=", 1))
        key = KEY_INDEX.get(name)
        if key is None:
            raise ConfigError(f"unknown key {name!r}", no)
        if name in lines:
            raise ConfigError(f"duplicate key {name!r} on lines {lines[name]} and {no}", no)
        values[name] = _parse_value(key, value, no)
        lines[name] = no
    return Config(values, lines)


def parse_config(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path} is not valid UTF-8: {exc}") from None
    return parse_config_text(text)


def format_config(cfg: Config) -> str:
    """Every key with its value and where the default comes from; re-parses to an equal config."""
    width = max(len(k.name) for k in KEYS)
    out = []
    for k in KEYS:
        out.append(f"{k.name.ljust(width)} = {_format_value(k, cfg[k.name])}  # {k.source}")
    return "\n".join(out) + "\n"

"""Flat ``key = value`` experiment configuration.

Every key has a type, a default and a range check. Unknown keys are errors.
Blank lines and ``#`` comments are ignored.
"""

import hashlib
from dataclasses import dataclass, field

from .dataset import AugmentConfig, LongTailSpec
from .losses import LossWeights

MODES = ("supervised", "fixmatch", "crmsp")


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where += f"key {key!r}"
        if line is not None:
            where += f"{' ' if where else ''}(line {line})"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class TrainConfig:
    mode: str = "crmsp"
    use_rp: bool = True
    use_lctr: bool = True
    use_mp: bool = True
    seed: int = 0
    # -1 means: same as seed
    data_seed: int = -1
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    batch_size: int = 4
    mu: float = 1.0
    iterations: int = 5000
    eval_every: int = 500
    checkpoint_every: int = 0
    bank_maxsize: int = 128
    hidden: int = 64
    n_layers: int = 2
    d_proj: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    dim: int = 8
    separation: float = 2.0
    data_dir: str = ""
    write_events: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: LongTailSpec = field(default_factory=LongTailSpec)

    @property
    def num_classes(self):
        return self.data.num_classes

    def effective_flags(self):
        """(use_rp, use_lctr, use_mp) after applying the mode."""
        if self.mode == "crmsp":
            return self.use_rp, self.use_lctr, self.use_mp
        return False, False, False

    def dataset_seed(self):
        return self.seed if self.data_seed < 0 else self.data_seed

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", key="mode")
        checks = [
            ("batch_size", self.batch_size >= 1),
            ("mu", self.mu > 0),
            ("iterations", self.iterations >= 0),
            ("eval_every", self.eval_every >= 1),
            ("checkpoint_every", self.checkpoint_every >= 0),
            ("bank_maxsize", self.bank_maxsize >= 1),
            ("hidden", self.hidden >= 1),
            ("n_layers", self.n_layers >= 1),
            ("d_proj", self.d_proj >= 1),
            ("lr", self.lr > 0),
            ("weight_decay", self.weight_decay >= 0),
            ("beta1", 0 <= self.beta1 < 1),
            ("beta2", 0 <= self.beta2 < 1),
            ("dim", self.dim >= 2),
            ("separation", self.separation >= 0),
            ("seeds", len(self.seeds) >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"value {getattr(self, key)!r} out of range", key=key)
        for section in (self.weights, self.augment, self.data):
            try:
                if section is self.weights:
                    section.validate(self.num_classes)
                else:
                    section.validate()
            except ValueError as exc:
                raise ConfigError(str(exc), key=_guess_key(str(exc))) from None
        return self


def _guess_key(message):
    for key in SCHEMA:
        if message.startswith(key) or f" {key} " in f" {message} ":
            return key
    return None


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int(s):
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"expected an integer, got {s!r}") from None


def _parse_float(s):
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"expected a number, got {s!r}") from None
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"expected a finite number, got {s!r}")
    return v


def _parse_gamma(s):
    if s.strip().lower() == "unknown":
        return "unknown"
    return _parse_float(s)


def _parse_int_list(s):
    return [_parse_int(p) for p in s.replace(",", " ").split()]


def _parse_str(s):
    return s.strip()


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (section, attribute, parser, bound check or None, description)
SCHEMA = {
    "mode": ("train", "mode", _parse_str, lambda v: v in MODES, "supervised | fixmatch | crmsp"),
    "use_rp": ("train", "use_rp", _parse_bool, None, "reweight pseudo-labels (crmsp mode)"),
    "use_lctr": ("train", "use_lctr", _parse_bool, None, "add the contrastive term (crmsp mode)"),
    "use_mp": ("train", "use_mp", _parse_bool, None, "merge top-K prototypes (crmsp mode)"),
    "seed": ("train", "seed", _parse_int, None, "run seed"),
    "data_seed": ("train", "data_seed", _parse_int, None, "dataset seed, -1 = follow seed"),
    "seeds": ("train", "seeds", _parse_int_list, lambda v: len(v) >= 1, "seed list for compare/ablate"),
    "batch_size": ("train", "batch_size", _parse_int, lambda v: v >= 1, "labeled batch size B"),
    "mu": ("train", "mu", _parse_float, lambda v: v > 0, "unlabeled/labeled batch ratio"),
    "iterations": ("train", "iterations", _parse_int, lambda v: v >= 0, "training steps"),
    "eval_every": ("train", "eval_every", _parse_int, lambda v: v >= 1, "steps between evaluations"),
    "checkpoint_every": ("train", "checkpoint_every", _parse_int, lambda v: v >= 0, "0 = final only"),
    "bank_maxsize": ("train", "bank_maxsize", _parse_int, lambda v: v >= 1, "queue length per class"),
    "hidden": ("train", "hidden", _parse_int, lambda v: v >= 1, "encoder width"),
    "n_layers": ("train", "n_layers", _parse_int, lambda v: v >= 1, "encoder depth"),
    "d_proj": ("train", "d_proj", _parse_int, lambda v: v >= 1, "projection dimension"),
    "lr": ("train", "lr", _parse_float, lambda v: v > 0, "AdamW learning rate"),
    "weight_decay": ("train", "weight_decay", _parse_float, lambda v: v >= 0, "decoupled weight decay"),
    "beta1": ("train", "beta1", _parse_float, lambda v: 0 <= v < 1, "first-moment decay"),
    "beta2": ("train", "beta2", _parse_float, lambda v: 0 <= v < 1, "second-moment decay"),
    "dim": ("train", "dim", _parse_int, lambda v: v >= 2, "input feature dimension"),
    "separation": ("train", "separation", _parse_float, lambda v: v >= 0, "mixture mean scale"),
    "data_dir": ("train", "data_dir", _parse_str, None, "dataset bundle; empty = generate"),
    "write_events": ("train", "write_events", _parse_bool, None, "write events.jsonl"),
    "lambda_un": ("weights", "lambda_un", _parse_float, lambda v: v >= 0, "unsupervised loss weight"),
    "lambda_ctr": ("weights", "lambda_ctr", _parse_float, lambda v: v >= 0, "contrastive loss weight"),
    "tau": ("weights", "tau", _parse_float, lambda v: 0 < v <= 1, "confidence threshold"),
    "t_proto": ("weights", "t_proto", _parse_float, lambda v: v > 0, "semantic logit temperature"),
    "m_temperature": ("weights", "m_temperature", _parse_float, lambda v: v > 0, "T in M(x) = 1 - x/T"),
    "dist_smoothing": ("weights", "dist_smoothing", _parse_float, lambda v: 0 <= v < 1, "class-distribution EMA"),
    "ema_momentum": ("weights", "ema_momentum", _parse_float, lambda v: 0 < v < 1, "teacher EMA momentum"),
    "merge_k": ("weights", "merge_k", _parse_int, lambda v: v >= 1, "classes merged into the super-class"),
    "weak_sigma": ("augment", "weak_sigma", _parse_float, lambda v: v >= 0, "weak-view noise"),
    "strong_swaps": ("augment", "strong_swaps", _parse_int, lambda v: v >= 1, "coordinate swaps"),
    "strong_sigma": ("augment", "strong_sigma", _parse_float, lambda v: v >= 0, "strong-view noise"),
    "num_classes": ("data", "num_classes", _parse_int, lambda v: v >= 2, "C"),
    "n1": ("data", "n1", _parse_int, lambda v: v >= 1, "labeled head-class count"),
    "m1": ("data", "m1", _parse_int, lambda v: v >= 1, "unlabeled head-class count"),
    "gamma_l": ("data", "gamma_l", _parse_float, lambda v: v >= 1, "labeled imbalance ratio"),
    "gamma_u": ("data", "gamma_u", _parse_gamma, lambda v: v == "unknown" or v >= 1, "unlabeled ratio or 'unknown'"),
    "rounding": ("data", "rounding", _parse_str, lambda v: v in ("floor", "round"), "floor | round"),
    "test_per_class": ("data", "test_per_class", _parse_int, lambda v: v >= 1, "balanced test size per class"),
}


def _section(cfg, name):
    return {"train": cfg, "weights": cfg.weights, "augment": cfg.augment, "data": cfg.data}[name]


def parse_config_text(text):
    cfg = TrainConfig()
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in seen:
            raise ConfigError(f"duplicate (first set on line {seen[key]})", key=key, line=lineno)
        seen[key] = lineno
        section, attr, parse, check, _ = SCHEMA[key]
        try:
            v = parse(value)
        except ValueError as exc:
            raise ConfigError(str(exc), key=key, line=lineno) from None
        if check is not None and not check(v):
            raise ConfigError(f"value {value!r} out of range", key=key, line=lineno)
        setattr(_section(cfg, section), attr, v)
    cfg.validate()
    return cfg


def parse_config(path):
    """Returns a validated TrainConfig; its ``data`` and ``augment`` fields hold the dataset and augmentation settings."""
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_items(cfg):
    return [(key, getattr(_section(cfg, s), a)) for key, (s, a, *_rest) in SCHEMA.items()]


def serialize_config(cfg):
    return "".join(f"{k} = {_fmt_value(v)}\n" for k, v in config_items(cfg))


def config_from_items(items):
    return parse_config_text("".join(f"{k} = {_fmt_value(v)}\n" for k, v in items))


def config_hash(cfg, length=12):
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:length]


# run length does not change which run a directory belongs to
_RUN_ID_EXCLUDED = ("iterations", "checkpoint_every")


def run_id(cfg):
    """Short hash of the config (seed included, run length excluded)."""
    text = "".join(
        f"{k} = {_fmt_value(v)}\n" for k, v in config_items(cfg) if k not in _RUN_ID_EXCLUDED
    )
    digest = hashlib.sha256(text.encode()).hexdigest()[:10]
    return f"{cfg.mode}-s{cfg.seed}-{digest}"


def replace(cfg, **changes):
    """Copy with flat-key overrides applied, re-validated."""
    items = dict(config_items(cfg))
    for k, v in changes.items():
        if k not in SCHEMA:
            raise ConfigError("unknown key", key=k)
        items[k] = v
    return config_from_items(items.items())


def schema_doc():
    lines = []
    defaults = dict(config_items(TrainConfig()))
    for key, (*_rest, doc) in SCHEMA.items():
        lines.append(f"{key} = {_fmt_value(defaults[key])}    # {doc}")
    return "\n".join(lines)


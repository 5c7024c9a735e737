"""Run configuration: a flat key-value text format with dotted section
prefixes (``schedule.a = 0.2``), strict about unknown keys, plus the run
manifest every command writes beside its outputs."""

import os
import time
from dataclasses import asdict

from .corpus import FilterConfig
from .errors import ConfigError
from .model import CHECKPOINT_FORMAT_VERSION, ModelConfig
from .schedule import ScheduleConfig
from .scoring import ScoreParams
from .seeding import STREAM_NAMES
from .trainer import METRICS_FORMAT_VERSION, TrainConfig
from .fileio import atomic_write_text

CONFIG_FORMAT_VERSION = 1


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _triple(text):
    parts = [float(x) for x in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected three numbers, got {text!r}")
    return tuple(parts)


# section -> key -> converter
SCHEMA = {
    "model": {
        "vocab_size": int, "d_model": int, "n_layers": int, "n_heads": int,
        "n_senses": int, "max_positions": int, "tie_output": _bool,
    },
    "train": {
        "learning_rate": float, "batch_size": int, "warmup_ratio": float,
        "clip_norm": float, "label_smoothing": float, "total_steps": int,
        "eval_every": int, "seed": int,
    },
    "schedule": {
        "a": float, "z": float, "align_weights": _triple, "joint_weights": _triple,
        "polish_weights": _triple, "tau_sns": float, "tau_ctx": float,
        "tau_pool": float, "temp_decay": _bool, "total_steps": int,
    },
    "filter": {
        "ratio_low": float, "ratio_high": float, "sim_threshold": float,
        "per_corpus_cap": int, "target_size": int, "seed": int,
    },
    "paths": {
        "train_bitext": str, "dev_bitext": str, "vocab": str, "out_dir": str,
        "alignments": str, "word_pairs": str, "items": str, "checkpoint": str,
        "control_checkpoint": str, "metrics": str, "bitext": str,
    },
    "options": {
        "sense_pooling": str, "retrieval_embedding": str, "entropy_source": str,
        "similarity": str, "dev_fraction": float,
    },
    "run": {"ablation": str, "mixture_mode": str},
    "score": {"scheme": str, "lambda": float, "alpha": float},
}

# Keys naming files a command reads; existence is checked at load time.
INPUT_PATH_KEYS = ("train_bitext", "dev_bitext", "vocab", "alignments",
                   "word_pairs", "items", "checkpoint", "control_checkpoint",
                   "metrics", "bitext")


class RunConfig:
    """Parsed configuration: nested dict of provided keys plus builders that
    apply package defaults for anything unspecified."""

    def __init__(self, sections=None):
        self.sections = sections or {}

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, default)

    def section(self, name):
        return dict(self.sections.get(name, {}))

    # -- builders ----------------------------------------------------------
    def model_config(self, vocab_size=None):
        kv = self.section("model")
        if vocab_size is not None and "vocab_size" not in kv:
            kv["vocab_size"] = vocab_size
        if "vocab_size" not in kv:
            raise ConfigError("model.vocab_size missing and no vocabulary to derive it from",
                              key="model.vocab_size")
        try:
            return ModelConfig(**kv)
        except ValueError as e:
            raise ConfigError(f"model: {e}", key="model") from None

    def train_config(self):
        try:
            return TrainConfig(**self.section("train"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}", key="train") from None

    def schedule_config(self, total_steps=None):
        kv = self.section("schedule")
        if "total_steps" not in kv:
            kv["total_steps"] = total_steps if total_steps is not None \
                else self.train_config().total_steps
        try:
            return ScheduleConfig(**kv)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"schedule: {e}", key="schedule") from None

    def filter_config(self):
        try:
            return FilterConfig(**self.section("filter"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"filter: {e}", key="filter") from None

    def score_params(self):
        kv = self.section("score")
        if "lambda" in kv:
            kv["lam"] = kv.pop("lambda")
        try:
            return ScoreParams(**kv)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"score: {e}", key="score") from None

    def path(self, key, required=False):
        p = self.get("paths", key)
        if required and not p:
            raise ConfigError(f"paths.{key} is required for this command",
                              key=f"paths.{key}")
        return p

    def flat(self):
        out = {}
        for section, kv in sorted(self.sections.items()):
            for k, v in sorted(kv.items()):
                if isinstance(v, tuple):
                    v = ",".join(repr(x) for x in v)
                out[f"{section}.{k}"] = v
        return out


def parse_config(text, source="<config>"):
    """Strict parse of ``section.key = value`` lines; '#' starts a comment."""
    sections = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} missing a section prefix",
                              key=key)
        section, name = key.split(".", 1)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown configuration key {key!r}",
                              key=key)
        try:
            converted = SCHEMA[section][name](value)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {e}",
                              key=key) from None
        sections.setdefault(section, {})[name] = converted
    return RunConfig(sections)


def load_config(path, check_paths=True):
    with open(path, encoding="utf-8") as f:
        cfg = parse_config(f.read(), source=str(path))
    if check_paths:
        base = os.path.dirname(os.path.abspath(path))
        for key in INPUT_PATH_KEYS:
            p = cfg.get("paths", key)
            if p is None:
                continue
            resolved = p if os.path.isabs(p) else os.path.join(base, p)
            if not os.path.exists(resolved):
                raise ConfigError(f"paths.{key} = {p!r} does not exist",
                                  key=f"paths.{key}")
            cfg.sections["paths"][key] = resolved
    return cfg


def dump_config(cfg):
    lines = [f"{k} = {v}" for k, v in cfg.flat().items()]
    return "\n".join(lines) + ("\n" if lines else "")


def config_snapshot(model_cfg=None, train_cfg=None, sched_cfg=None,
                    filter_cfg=None, score=None, extra=None):
    """Fully-resolved key=value view of the configs a command actually used."""
    out = {}

    def put(section, obj, rename=None):
        if obj is None:
            return
        for k, v in asdict(obj).items():
            k = (rename or {}).get(k, k)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            out[f"{section}.{k}"] = v

    put("model", model_cfg)
    put("train", train_cfg)
    put("schedule", sched_cfg)
    put("filter", filter_cfg)
    put("score", score, rename={"lam": "lambda"})
    for k, v in (extra or {}).items():
        out[k] = v
    return out


def write_manifest(out_dir, command, snapshot, seed, argv=()):
    """Record everything needed to reproduce a run bit-identically."""
    lines = [
        f"# senselign run manifest",
        f"command = {command}",
        f"argv = {' '.join(argv)}",
        f"created_unix = {int(time.time())}",
        f"seed = {seed}",
        f"format.config = {CONFIG_FORMAT_VERSION}",
        f"format.checkpoint = {CHECKPOINT_FORMAT_VERSION}",
        f"format.metrics = {METRICS_FORMAT_VERSION}",
        "# rng streams are derived as SeedSequence(seed, spawn_key=(stream,)):",
    ]
    for sid, name in sorted(STREAM_NAMES.items()):
        lines.append(f"rng.stream.{name} = {sid}")
    for k, v in sorted(snapshot.items()):
        lines.append(f"{k} = {v}")
    path = os.path.join(out_dir, "manifest.txt")
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path

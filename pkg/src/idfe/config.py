"""Flat ``key = value`` run configuration.

One key per line, UTF-8, ``#`` starts a comment. Every key has a type and
a default in :data:`SCHEMA`; unknown keys, duplicates and unparsable
values are errors. A resolved config (defaults + file + overrides) is
written next to every run's outputs, and its hash names the run directory.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    type: type
    default: object
    help: str
    choices: tuple = ()


SCHEMA = {
    # inputs
    "manifest": Key(str, "", "data manifest (training data for train, wav manifest for prep)"),
    "checkpoint": Key(str, "", "IDFC checkpoint for eval, probe and export-emb"),
    "case": Key(int, 0, "training case 1-4 composed from corpora A, B, C; 0 uses every domain"),
    "corpora": Key(str, "", "comma-separated corpus names playing roles A, B, C"),
    # synthetic corpora
    "split": Key(str, "train", "synth split; eval adds the unseen-bias domain", ("train", "eval")),
    "per_class": Key(int, 100, "synth utterances per domain and class"),
    "num_domains": Key(int, 3, "synth training domains"),
    "frame_dim": Key(int, 32, "synth frame dimension"),
    "num_layers": Key(int, 3, "synth layers per stack"),
    "bias_magnitude": Key(float, 2.0, "domain bias magnitude"),
    "class_separation": Key(float, 1.0, "class direction magnitude"),
    "noise_std": Key(float, 1.0, "frame noise standard deviation"),
    "min_frames": Key(int, 4, "shortest synthetic utterance in frames"),
    "max_frames": Key(int, 12, "longest synthetic utterance in frames"),
    "direction_seed": Key(int, 1234, "seed of the class and bias directions"),
    "unseen_domain": Key(bool, True, "emit the unseen-bias domain in the eval split"),
    # model
    "num_heads": Key(int, 4, "MHFA heads"),
    "value_dim": Key(int, 16, "MHFA value dimension per head"),
    "embedding_dim": Key(int, 64, "utterance embedding dimension"),
    "hidden_dim": Key(int, 128, "hidden width of both heads"),
    "dropout": Key(float, 0.2, "dropout rate of both heads"),
    "use_encoder": Key(bool, True, "trainable per-frame encoder before pooling"),
    # training
    "alpha": Key(float, 0.1, "weight of the domain loss"),
    "lr": Key(float, 1e-3, "Adam learning rate"),
    "batch_size": Key(int, 32, "utterances per batch"),
    "epochs": Key(int, 30, "training epochs"),
    "lambda_gamma": Key(float, 10.0, "steepness of the reversal-strength schedule"),
    "class_weight_mode": Key(str, "ratio", "spoof loss class weights", ("ratio", "none")),
    "segment_seconds": Key(float, 4.0, "training crop length"),
    "frame_rate": Key(float, 50.0, "frames per second of layer stacks"),
    "precision": Key(str, "float32", "training precision", ("float32", "float64")),
    # waveform preparation
    "assets": Key(str, "", "asset manifest (path, category) for augmentation"),
    "augment": Key(str, "none", "augmentation policy", ("none", "random", "reverb", "speech", "music", "noise")),
    "prep_order": Key(str, "trim_first", "order of trimming and augmentation", ("trim_first", "augment_first")),
    "top_db": Key(float, 40.0, "trimming threshold below the loudest frame"),
    "trim_frame": Key(int, 2048, "trimming frame length in samples"),
    "trim_hop": Key(int, 512, "trimming hop in samples"),
    "prep_segment_seconds": Key(float, 0.0, "fixed output length; 0 keeps full utterances"),
    # probe
    "probe_train_frac": Key(float, 0.8, "probe training fraction"),
    "probe_steps": Key(int, 200, "probe optimizer steps"),
    "probe_lr": Key(float, 0.1, "probe learning rate"),
    # run
    "seed": Key(int, 0, "master seed"),
}


def _parse_value(name, text):
    key = SCHEMA[name]
    try:
        if key.type is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            value = low in ("true", "1", "yes")
        elif key.type is int:
            value = int(text)
        elif key.type is float:
            value = float(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {key.type.__name__}") from None
    if key.choices and value not in key.choices:
        raise ConfigError(f"{name}: {value!r} is not one of {', '.join(key.choices)}")
    return value


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text, origin="<config>"):
    """``{key: value}`` for the keys present in ``text``."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        name, value = (part.strip() for part in line.split("=", 1))
        if name not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {name!r}")
        if name in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {name!r}")
        values[name] = _parse_value(name, value)
    return values


class Config:
    """Resolved configuration: every schema key has a value."""

    def __init__(self, values=None):
        self.values = {name: key.default for name, key in SCHEMA.items()}
        for name, value in (values or {}).items():
            if name not in SCHEMA:
                raise ConfigError(f"unknown key {name!r}")
            self.values[name] = value

    @classmethod
    def load(cls, path=None, overrides=(), seed=None):
        """Defaults, then the file at ``path``, then ``KEY=VALUE`` overrides, then ``seed``."""
        values = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            except UnicodeDecodeError:
                raise ConfigError(f"config {path} is not valid UTF-8") from None
            values.update(parse_text(text, str(path)))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            name, value = (part.strip() for part in item.split("=", 1))
            if name not in SCHEMA:
                raise ConfigError(f"--set: unknown key {name!r}")
            values[name] = _parse_value(name, value)
        if seed is not None:
            values["seed"] = int(seed)
        return cls(values)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_text(self):
        return "".join(f"{name} = {_format_value(self.values[name])}\n" for name in sorted(self.values))

    def digest(self, length=10):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:length]

    def write_snapshot(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


def schema_text():
    """Commented listing of every key with its default, usable as a config file."""
    lines = []
    for name, key in SCHEMA.items():
        lines.append(f"# {key.help}" + (f" ({'|'.join(key.choices)})" if key.choices else ""))
        lines.append(f"{name} = {_format_value(key.default)}")
    return "\n".join(lines) + "\n"

"""Flat key-value experiment configuration.

Grammar: one `key = value` per line, `#` starts a comment, lists are
comma-separated, booleans are true/false. Unknown keys are errors so a typo
never silently falls back to a default. The single path-valued key
(out_dir) resolves relative to the config file's directory; with no config
file it resolves relative to the working directory. The fully-resolved
effective config can be rendered back to text, and its hash names the run
directory so distinct configurations never collide.
"""

import hashlib
import os
from dataclasses import dataclass, field

from .distill import VARIANTS
from .formats import VALUE_WIDTHS


class ConfigError(ValueError):
    pass


def _parse_int(text):
    return int(text)


def _parse_float(text):
    return float(text)


def _parse_bool(text):
    low = text.strip().lower()
    if low == "true":
        return True
    if low == "false":
        return False
    raise ConfigError(f"expected true or false, got {text!r}")


def _parse_str(text):
    return text.strip()


def _parse_shape(text):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected ROWSxCOLS, got {text!r}")
    rows, cols = (int(p) for p in parts)
    if rows < 1 or cols < 1:
        raise ConfigError(f"shape dimensions must be positive, got {text!r}")
    return (rows, cols)


def _list_of(item_parser):
    def parse(text):
        items = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item_parser(p) for p in items)

    return parse


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


_SHAPE_KEYS = ("bench_shape",)


def _fmt_for(key, value):
    if key in _SHAPE_KEYS:
        return f"{value[0]}x{value[1]}"
    return _fmt(value)

# key -> (default, parser). Order here is the canonical render order.
SCHEMA = {
    # model
    "vocab": (32, _parse_int),
    "d_model": (64, _parse_int),
    "blocks": (2, _parse_int),
    "seq": (16, _parse_int),
    # task
    "task_seed": (0, _parse_int),
    "train_size": (2048, _parse_int),
    "val_size": (512, _parse_int),
    "test_size": (512, _parse_int),
    # teacher
    "teacher_epochs": (20, _parse_int),
    "teacher_lr": (0.1, _parse_float),
    "teacher_seed": (2, _parse_int),
    # fine-tuning and experiment grid
    "finetune_seed": (1, _parse_int),
    "finetune_size": (128, _parse_int),
    "epochs": (150, _parse_int),
    "lr": (0.2, _parse_float),
    "warmup_frac": (0.1, _parse_float),
    "weight_decay": (0.0, _parse_float),
    "lam": (1.0, _parse_float),
    "batch_size": (32, _parse_int),
    "seeds": ((10, 11, 12), _list_of(_parse_int)),
    "sparsities": ((0.75, 0.9), _list_of(_parse_float)),
    "variants": (VARIANTS, _list_of(_parse_str)),
    "variant": ("ce", _parse_str),
    "quantize": (True, _parse_bool),
    # gradual pruning schedule (experiment prune mode)
    "prune_mode": ("oneshot", _parse_str),
    "sparsity_levels": ((0.5, 0.75, 0.9), _list_of(_parse_float)),
    "schedule_epochs_per_level": (0, _parse_int),
    "restart_schedule_per_level": (True, _parse_bool),
    # bench
    "bench_shape": ((4096, 12288), _parse_shape),
    "bench_sparsities": ((0.5, 0.6, 0.7, 0.8, 0.9), _list_of(_parse_float)),
    "bench_width": ("fp32", _parse_str),
    "bench_reps": (50, _parse_int),
    "bench_warmup": (5, _parse_int),
    "bench_threads": (1, _parse_int),
    "bench_tile_rows": (128, _parse_int),
    # output
    "out_dir": ("runs", _parse_str),
}


def _validate(values):
    for v in values["variants"]:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r} in variants")
    if values["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {values['variant']!r}")
    if values["bench_width"] not in VALUE_WIDTHS:
        raise ConfigError(f"unknown bench_width {values['bench_width']!r}")
    if values["prune_mode"] not in ("oneshot", "schedule"):
        raise ConfigError(
            f"prune_mode must be oneshot or schedule, got {values['prune_mode']!r}")
    for s in values["sparsities"]:
        if not 0.0 <= s < 1.0:
            raise ConfigError(f"sparsity {s} outside [0, 1)")
    for s in values["bench_sparsities"]:
        if not 0.0 <= s < 1.0:
            raise ConfigError(f"bench sparsity {s} outside [0, 1)")
    levels = values["sparsity_levels"]
    if any(not 0.0 < l <= 1.0 for l in levels) or list(levels) != sorted(set(levels)):
        raise ConfigError("sparsity_levels must be strictly increasing in (0, 1]")


@dataclass
class Config:
    """Resolved configuration: every schema key bound to a concrete value."""

    values: dict
    source: str = ""
    base_dir: str = "."
    overridden: tuple = field(default_factory=tuple)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def resolved_out_dir(self):
        return os.path.normpath(os.path.join(self.base_dir, self.values["out_dir"]))

    def effective_text(self):
        lines = [f"{k} = {_fmt_for(k, v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.effective_text().encode()).hexdigest()[:12]

    def run_dir(self):
        return os.path.join(self.resolved_out_dir(), f"run-{self.config_hash()}")

    def write_effective(self, directory):
        path = os.path.join(directory, "effective.cfg")
        with open(path, "w") as fh:
            fh.write(self.effective_text())
        return path


def parse_config_text(text, source="<string>"):
    """Parse config body text into an overrides dict (unknown keys error)."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        _, parser = SCHEMA[key]
        try:
            overrides[key] = parser(value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return overrides


def load_config(path=None, overrides=None):
    """Build a Config from defaults, an optional file, and final overrides."""
    values = {k: default for k, (default, _) in SCHEMA.items()}
    touched = []
    base_dir = "."
    source = "<defaults>"
    if path is not None:
        with open(path) as fh:
            text = fh.read()
        file_overrides = parse_config_text(text, source=str(path))
        values.update(file_overrides)
        touched.extend(file_overrides)
        base_dir = os.path.dirname(os.path.abspath(path))
        source = str(path)
    for key, value in (overrides or {}).items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
        touched.append(key)
    _validate(values)
    return Config(values, source=source, base_dir=base_dir,
                  overridden=tuple(dict.fromkeys(touched)))

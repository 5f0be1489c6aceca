"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment, blank lines are ignored. Unknown
keys, duplicates and malformed values are rejected with the line number.
"""
from __future__ import annotations

from dataclasses import dataclass

from .data import BLUR_SIGMA
from .errors import ConfigError
from .net import ABLATIONS, NetConfig
from .train import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: object
    doc: str


KEYS = (
    Key("net.bands", int, 4, "spectral bands C"),
    Key("net.base_channels", int, 32, "U-Net feature width"),
    Key("net.depth", int, 3, "U-Net levels (scales 1, 2, 4, ...)"),
    Key("net.blocks", int, 1, "ResBlocks per level"),
    Key("net.k", int, 3, "BiMAC kernel size (odd)"),
    Key("net.alpha", float, 2.0, "hard-mask threshold multiplier"),
    Key("net.ablation", str, "full", "one of " + ", ".join(ABLATIONS)),
    Key("train.lr0", float, 6e-4, "initial learning rate"),
    Key("train.decay", float, 0.8, "learning-rate decay factor"),
    Key("train.period", int, 200, "epochs between decays"),
    Key("train.batch", int, 32, "batch size"),
    Key("train.epochs", int, 1, "training epochs"),
    Key("train.seed", int, 0, "seed for init, shuffling and synthetic data"),
    Key("train.max_iters", int, 0, "stop after this many Adam steps (0 = no limit)"),
    Key("data.dir", str, "", "dataset directory (empty = synthesize in memory)"),
    Key("data.count", int, 64, "training samples to synthesize"),
    Key("data.val_count", int, 16, "held-out samples"),
    Key("data.h", int, 64, "ground-truth height"),
    Key("data.w", int, 64, "ground-truth width"),
    Key("data.blur_sigma", float, BLUR_SIGMA, "Gaussian blur sigma for degradation"),
    Key("data.pan_weights", str, "", "comma-separated PAN band weights (empty = uniform)"),
    Key("out.dir", str, "out", "output directory"),
)
KEY_INDEX = {k.name: k for k in KEYS}


def _convert(key, raw, line=None):
    try:
        if key.kind is int:
            return int(raw)
        if key.kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key.name}: expected {key.kind.__name__}, got {raw!r}", line) from None
    return raw


class RunConfig:
    def __init__(self, values=None):
        self.values = {k.name: k.default for k in KEYS}
        for name, v in (values or {}).items():
            self.set(name, v)

    def __getitem__(self, name):
        return self.values[name]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def set(self, name, value, line=None):
        key = KEY_INDEX.get(name)
        if key is None:
            raise ConfigError(f"unknown key {name!r}", line)
        self.values[name] = _convert(key, value, line) if isinstance(value, str) else key.kind(value)

    def net(self):
        v = self.values
        return NetConfig(v["net.bands"], v["net.base_channels"], v["net.depth"], v["net.blocks"],
                         v["net.k"], v["net.alpha"], v["net.ablation"]).validate()

    def train(self):
        v = self.values
        if v["train.batch"] < 1 or v["train.period"] < 1 or v["train.epochs"] < 0:
            raise ConfigError("train.batch and train.period must be positive, train.epochs non-negative")
        return TrainConfig(lr0=v["train.lr0"], decay=v["train.decay"], period=v["train.period"],
                           batch=v["train.batch"], epochs=v["train.epochs"], seed=v["train.seed"],
                           max_iters=v["train.max_iters"] or None)

    def pan_weights(self):
        raw = self.values["data.pan_weights"].strip()
        if not raw:
            return None
        try:
            return [float(t) for t in raw.split(",")]
        except ValueError:
            raise ConfigError(f"data.pan_weights: cannot parse {raw!r}") from None

    def dump(self):
        out = []
        for k in KEYS:
            v = self.values[k.name]
            out.append(f"{k.name} = {repr(v) if k.kind is float else v}")
        return "\n".join(out) + "\n"


def parse(text):
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        name, value = (t.strip() for t in line.split("=", 1))
        if name in seen:
            raise ConfigError(f"duplicate key {name!r}", lineno)
        seen.add(name)
        cfg.set(name, value, lineno)
    return cfg


def load(path):
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def keys_help():
    width = max(len(k.name) for k in KEYS)
    lines = ["config keys (key = value, '#' comments):"]
    for k in KEYS:
        lines.append(f"  {k.name:{width}s}  {k.kind.__name__:5s} default {k.default!r:10s} {k.doc}")
    return "\n".join(lines)

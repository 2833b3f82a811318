"""Flat key=value experiment configuration and derived seed streams.

Precedence: built-in defaults, then the config file, then command-line
overrides.  Unknown keys are rejected.  Every random decision in the
package draws from a named substream of the single `seed` key so that
data splitting, clustering, training and evaluation can be varied
independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

# substream tags appended to the root seed
STREAM_DATA = 1
STREAM_CLUSTER = 2
STREAM_INIT = 3
STREAM_TRAIN = 4
STREAM_EVAL = 5
STREAM_BASELINE = 6


def substream(seed: int, stream: int, *extra: int) -> list:
    """Seed-sequence key for an independent named random stream."""
    return [int(seed), int(stream), *[int(e) for e in extra]]


_GRANULARITIES = ("subpe", "gpe", "suppe")


@dataclass
class Config:
    embedding_dim: int = 32
    num_subsets: int = 3
    gcn_layers: int = 2
    lambda1: float = 0.5
    margin: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 100
    train_negatives: int = 1
    eval_negatives: int = 100
    ks: str = "5,10"
    kmeans_max_iters: int = 100
    kmeans_restarts: int = 3
    seed: int = 42
    graph_weighted: bool = False
    ablate: str = ""

    def ks_list(self) -> list:
        return [int(k) for k in self.ks.split(",") if k.strip()]

    def ablated(self) -> list:
        return [a.strip() for a in self.ablate.split(",") if a.strip()]

    def resolved(self) -> dict:
        """File-key view of the full configuration, for echo/persistence."""
        out = {}
        for file_key, attr, _ in _KEYS:
            v = getattr(self, attr)
            out[file_key] = ("true" if v else "false") if isinstance(v, bool) else v
        return out


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(s)


# (file key, attribute, parser)
_KEYS = [
    ("embedding_dim", "embedding_dim", int),
    ("num_subsets", "num_subsets", int),
    ("gcn_layers", "gcn_layers", int),
    ("lambda1", "lambda1", float),
    ("margin", "margin", float),
    ("learning_rate", "learning_rate", float),
    ("batch_size", "batch_size", int),
    ("epochs", "epochs", int),
    ("train_negatives", "train_negatives", int),
    ("eval_negatives", "eval_negatives", int),
    ("ks", "ks", str),
    ("kmeans_max_iters", "kmeans_max_iters", int),
    ("kmeans_restarts", "kmeans_restarts", int),
    ("seed", "seed", int),
    ("graph.weighted", "graph_weighted", _parse_bool),
    ("ablate", "ablate", str),
]
_KEY_MAP = {k: (attr, parse) for k, attr, parse in _KEYS}


def _apply(cfg: Config, key: str, raw: str, origin: str) -> None:
    if key not in _KEY_MAP:
        raise ConfigError(f"{origin}: unknown configuration key {key!r}")
    attr, parse = _KEY_MAP[key]
    try:
        setattr(cfg, attr, parse(raw.strip()) if parse is not str else raw.strip())
    except ValueError as e:
        raise ConfigError(f"{origin}: bad value for {key!r}: {raw!r}") from e


def _validate(cfg: Config) -> None:
    def positive(key, v):
        if v <= 0:
            raise ConfigError(f"configuration key {key!r} must be positive, got {v}")

    positive("embedding_dim", cfg.embedding_dim)
    if cfg.embedding_dim % 2:
        raise ConfigError(f"embedding_dim must be even, got {cfg.embedding_dim}")
    positive("num_subsets", cfg.num_subsets)
    positive("gcn_layers", cfg.gcn_layers)
    positive("learning_rate", cfg.learning_rate)
    positive("batch_size", cfg.batch_size)
    positive("epochs", cfg.epochs)
    positive("eval_negatives", cfg.eval_negatives)
    positive("kmeans_max_iters", cfg.kmeans_max_iters)
    positive("kmeans_restarts", cfg.kmeans_restarts)
    if cfg.lambda1 < 0:
        raise ConfigError(f"lambda1 must be >= 0, got {cfg.lambda1}")
    if cfg.margin < 0:
        raise ConfigError(f"margin must be >= 0, got {cfg.margin}")
    if cfg.train_negatives < 0:
        raise ConfigError(f"train_negatives must be >= 0, got {cfg.train_negatives}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")
    if not cfg.ks_list():
        raise ConfigError("ks must name at least one cutoff")
    for k in cfg.ks_list():
        if k < 1:
            raise ConfigError(f"ks entries must be >= 1, got {k}")
    if cfg.graph_weighted:
        raise ConfigError("graph.weighted=true is reserved and not supported")
    for a in cfg.ablated():
        if a not in _GRANULARITIES:
            raise ConfigError(f"ablate names unknown granularity {a!r}")


def parse_config(path=None, overrides=()) -> Config:
    """Resolve defaults <- file <- overrides, validating every key."""
    cfg = Config()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected `key = value`, got {line!r}")
            key, raw = line.split("=", 1)
            _apply(cfg, key.strip(), raw, f"{path}: line {lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must have the form key=value")
        key, raw = item.split("=", 1)
        _apply(cfg, key.strip(), raw, "command line")
    _validate(cfg)
    return cfg


def write_resolved(cfg: Config, path) -> None:
    """Persist the fully resolved configuration as `key = value` lines."""
    lines = [f"{k} = {v}" for k, v in cfg.resolved().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_resolved(cfg: Config) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.resolved().items())

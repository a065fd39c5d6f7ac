"""Flat key-value run configuration.

Grammar (one entry per line):

    # comment, blank lines ignored
    key = value

Keys match ``[A-Za-z_][A-Za-z0-9_.]*``. Values are typed by syntax: ``true``
/ ``false`` are booleans, integer and float literals are numeric, quoted
strings are strings, and a comma-separated sequence is a list of scalars.
Serialization quotes every string, so configs round-trip losslessly.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")
_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")


class ConfigError(ValueError):
    """Malformed config text or unknown keys."""


def _parse_scalar(token: str):
    token = token.strip()
    if token == "true":
        return True
    if token == "false":
        return False
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    if _INT_RE.match(token):
        return int(token)
    if _FLOAT_RE.match(token):
        return float(token)
    return token


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_kv(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        if "," in value:
            out[key] = [_parse_scalar(tok) for tok in value.split(",")]
        else:
            out[key] = _parse_scalar(value)
    return out


def dump_kv(items: dict) -> str:
    lines = []
    for key in items:
        value = items[key]
        if isinstance(value, (list, tuple)):
            body = ", ".join(_format_scalar(v) for v in value)
        else:
            body = _format_scalar(value)
        lines.append(f"{key} = {body}")
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    """Everything one experiment run needs, flat and serializable."""

    dataset_kind: str = "ring-mixture"
    dataset_size: int = 8192
    dataset_seed: int = 0
    model_hidden: int = 128
    model_depth: int = 4
    model_temb_dim: int = 64
    model_activation: str = "silu"
    diffusion_t: int = 1000
    diffusion_beta_start: float = 1e-4
    diffusion_beta_end: float = 0.02
    train_lr: float = 2e-4
    train_beta1: float = 0.9
    train_beta2: float = 0.999
    train_batch: int = 128
    pretrain_steps: int = 20000
    plan_s: float = 0.5
    plan_total_steps: int = 20000
    plan_m_iters: int = 40
    plan_n_iters: int = 20
    plan_interval: int = 100
    plan_criterion: str = "gradient-flow"
    plan_mode: str = "progressive-soft"
    plan_granularity: str = "element"
    plan_final_criterion: str = "taylor"
    plan_final_granularity: str = "row-group"
    plan_hvp_method: str = "exact"
    plan_score_batches: int = 4
    plan_score_batch_size: int = 256
    eval_samples: int = 10000
    eval_substeps: int = 100
    eval_seed: int = 77
    trace_samples: int = 512
    trace_substeps: int = 20
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"

    def to_text(self) -> str:
        return dump_kv(asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        items = parse_kv(text)
        known = {f.name for f in fields(cls)}
        unknown = set(items) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**items)
        if isinstance(cfg.seeds, int):
            cfg.seeds = [cfg.seeds]
        cfg.seeds = [int(s) for s in cfg.seeds]
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def pretrain_digest(self) -> str:
        """Hash of the fields a pretrained checkpoint depends on, so prune
        arms with different plans can share one pretrain."""
        keys = [
            "dataset_kind", "dataset_size", "dataset_seed", "model_hidden",
            "model_depth", "model_temb_dim", "model_activation", "diffusion_t",
            "diffusion_beta_start", "diffusion_beta_end", "train_lr",
            "train_beta1", "train_beta2", "train_batch", "pretrain_steps",
        ]
        items = asdict(self)
        text = dump_kv({k: items[k] for k in keys})
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

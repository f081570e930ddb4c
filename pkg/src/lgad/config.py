"""Run configuration: a flat ``key=value`` file plus command-line overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    seed: int = 0
    dataset: str = "glyph"
    mnist_images: str = ""
    mnist_labels: str = ""
    n_images: int = 5000
    test_fraction: float = 0.2
    blocked: bool = False
    block_prob: float = 0.5
    latent_dim: int = 32
    pair_aligned: bool = True
    tau: float = 0.5
    alpha_init: float = 0.5
    operator: str = "geometric"
    lambda_r: float = 1.0
    lambda_i: float = 1.0
    lambda_v: float = 1.0
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 64
    n_pairs: int = 4000
    n_test_pairs: int = 1000
    hidden_widths: tuple[int, ...] = (256, 64)
    output_dir: str = "runs/default"

    def validate(self) -> TrainingConfig:
        def bad(key, why):
            raise ConfigError(f"{key}: {why} (got {getattr(self, key)!r})")

        if not 0 <= self.seed < 2 ** 64:
            bad("seed", "must be a u64")
        if self.dataset not in ("glyph", "mnist-idx"):
            bad("dataset", "must be 'glyph' or 'mnist-idx'")
        if self.dataset == "mnist-idx" and not (self.mnist_images and self.mnist_labels):
            raise ConfigError("dataset=mnist-idx needs mnist_images and mnist_labels paths")
        if self.n_images < 10:
            bad("n_images", "must be >= 10")
        if not 0.0 < self.test_fraction < 1.0:
            bad("test_fraction", "must lie in (0, 1)")
        if not 0.0 <= self.block_prob <= 1.0:
            bad("block_prob", "must lie in [0, 1]")
        if self.latent_dim < 2:
            bad("latent_dim", "must be >= 2")
        if self.pair_aligned and self.latent_dim % 2:
            bad("latent_dim", "must be even when pair_aligned is on")
        if self.operator == "geometric" and not self.pair_aligned:
            bad("pair_aligned", "the geometric operator needs pair-aligned masks")
        if not 0.0 < self.tau < 1.0:
            bad("tau", "must lie in (0, 1)")
        if not abs(self.alpha_init) < float("inf"):
            bad("alpha_init", "must be finite")
        if self.operator not in ("geometric", "learned"):
            bad("operator", "must be 'geometric' or 'learned'")
        for key in ("lambda_r", "lambda_i", "lambda_v"):
            v = getattr(self, key)
            if not (v >= 0.0 and v < float("inf")):
                bad(key, "must be finite and >= 0")
        if not 0.0 < self.lr < 1.0:
            bad("lr", "must lie in (0, 1)")
        for key in ("epochs", "batch", "n_pairs", "n_test_pairs"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            bad("hidden_widths", "must be a non-empty list of positive widths")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    def resolved_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(w) for w in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        # output_dir does not affect results
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_FIELDS = {f.name: f for f in fields(TrainingConfig)}


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(w) for w in raw.replace("[", "").replace("]", "").split(",") if w.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        k = normalize_key(key)
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[k] = _coerce(k, raw)
    return out


def read_config_file(path) -> dict[str, str]:
    pairs = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return pairs


def parse_config(path=None, overrides: dict[str, str] | None = None) -> TrainingConfig:
    """Defaults, then file values, then overrides (flags win)."""
    values = {}
    if path:
        values.update(parse_pairs(read_config_file(path)))
    values.update(parse_pairs(overrides or {}))
    return TrainingConfig(**values).validate()


def write_resolved(cfg: TrainingConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.resolved_text())
    return path

"""Flat ``key = value`` run configuration shared by the CLI commands.

Recognized keys (defaults in parentheses)::

    model (mixsgcl)      bpr | sslrec | sgcl | mixsgcl
    tau (0.2)            contrastive temperature
    lam (0.1)            SSLRec contrastive weight
    view_mode (identity) identity | noise   (SSLRec views)
    noise_eps (0.1)      SSLRec noise scale
    exclude_self (false) drop the anchor pair's own SGCL denominator terms
    n_mix (1)            mixup rounds for mixsgcl
    beta_high (0.5)      upper bound of the edge-mixup ratio
    alpha_per_node (false)
    separate_terms (false)
    batch_size (1024)  embedding_dim (64)  lr (0.001)  layers (3)
    max_epochs (300)   patience (10)       eval_k (20)  seed (2024)
    dtype (float64)    threads (1)
    k_core (5)  ratios (0.8,0.1,0.1)  split_seed (2024)  train_keep_ratio (1.0)
    delimiter (\\t)  timestamp_col (2)

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .augmentation import MixupConfig
from .dataset import SplitConfig
from .objectives import LossConfig, LossKind, ViewMode
from .trainer import TrainConfig, with_model

MODELS = ("bpr", "sslrec", "sgcl", "mixsgcl")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ratios(text: str) -> tuple[float, float, float]:
    parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
    vals = tuple(float(p) for p in parts)
    if len(vals) != 3:
        raise ValueError(f"expected three ratios, got {text!r}")
    total = sum(vals)
    # 8:1:1 style input is accepted and rescaled
    return vals if abs(total - 1.0) <= 1e-9 else tuple(v / total for v in vals)


def _delimiter(text: str) -> str:
    return {"\\t": "\t", "tab": "\t", "comma": ",", "space": " "}.get(text, text)


@dataclass(frozen=True)
class RunConfig:
    model: str = "mixsgcl"
    tau: float = 0.2
    lam: float = 0.1
    view_mode: str = "identity"
    noise_eps: float = 0.1
    exclude_self: bool = False
    n_mix: int = 1
    beta_high: float = 0.5
    alpha_per_node: bool = False
    separate_terms: bool = False
    batch_size: int = 1024
    embedding_dim: int = 64
    lr: float = 1e-3
    layers: int = 3
    max_epochs: int = 300
    patience: int = 10
    eval_k: int = 20
    seed: int = 2024
    dtype: str = "float64"
    threads: int = 1
    k_core: int = 5
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 2024
    train_keep_ratio: float = 1.0
    delimiter: str = "\t"
    timestamp_col: int = 2

    def validate(self) -> list[str]:
        errors = []
        if self.model not in MODELS:
            errors.append(f"model must be one of {', '.join(MODELS)}, got {self.model!r}")
        if self.view_mode not in ("identity", "noise"):
            errors.append(f"view_mode must be identity or noise, got {self.view_mode!r}")
        if self.threads < 1:
            errors.append(f"threads must be >= 1, got {self.threads}")
        if self.k_core < 1:
            errors.append(f"k_core must be >= 1, got {self.k_core}")
        errors += self.split_config().validate()
        if not errors:
            errors += self.train_config().validate()
        return errors

    def split_config(self) -> SplitConfig:
        return SplitConfig(ratios=tuple(self.ratios), seed=self.split_seed,
                           train_keep_ratio=self.train_keep_ratio)

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            loss=LossConfig(
                kind=LossKind.SGCL,
                temperature=self.tau,
                lam=self.lam,
                view_mode=ViewMode(self.view_mode),
                noise_eps=self.noise_eps,
                exclude_self=self.exclude_self,
            ),
            mixup=MixupConfig(
                n_mix=self.n_mix,
                beta_high=self.beta_high,
                seed=self.seed,
                alpha_per_node=self.alpha_per_node,
                separate_terms=self.separate_terms,
            ),
            batch_size=self.batch_size,
            embedding_dim=self.embedding_dim,
            learning_rate=self.lr,
            n_layers=self.layers,
            max_epochs=self.max_epochs,
            patience=self.patience,
            eval_k=self.eval_k,
            seed=self.seed,
            dtype=self.dtype,
        )
        return with_model(cfg, self.model)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_PARSERS = {
    bool: _bool,
    int: int,
    float: float,
    str: str,
}


def _field_parser(name: str):
    if name == "ratios":
        return _ratios
    if name == "delimiter":
        return _delimiter
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    return _PARSERS[{"bool": bool, "int": int, "float": float, "str": str}[ftype]]


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from string values, collecting every error before raising."""
    known = {f.name for f in fields(RunConfig)}
    errors, values = [], {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in known:
            errors.append(f"unknown config key {key!r}")
            continue
        try:
            values[name] = _field_parser(name)(raw.strip() if name != "delimiter" else raw)
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    cfg = replace(base or RunConfig(), **values)
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def read_config_file(path) -> dict[str, str]:
    pairs, errors = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"{path}:{lineno}: expected 'key = value'")
            continue
        key, value = stripped.split("=", 1)
        pairs[key.strip()] = value.strip()
    if errors:
        raise ConfigError(errors)
    return pairs


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if key == "ratios":
            value = ",".join(repr(float(r)) for r in value)
        elif key == "delimiter":
            value = {"\t": "\\t", " ": "space"}.get(value, value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

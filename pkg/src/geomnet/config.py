"""Run configuration: a flat ``key = value`` text format with named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import GeomNetConfig
from .optim import AdamConfig
from .spd import MetricConfig
from .topology import ConfigError

# Named starting points; a config file or flags override individual keys.
PRESETS = {
    # desk-scale synthetic run
    "desk": dict(dataset="synthetic", d=6, n_clusters=8, k=2, k_prime=1, n_classes=2,
                 alpha=1e-2, batch_size=30, epochs=200),
    # published SBU settings
    "sbu": dict(dataset="sbu", d=9, n_clusters=180, k=2, k_prime=3, n_classes=8,
                alpha=1e-2, batch_size=30, epochs=600),
    # published NTU settings (no NTU loader ships with this package)
    "ntu": dict(dataset="ntu", topology="ntu", d=9, n_clusters=180, k=2, k_prime=1,
                n_classes=60, alpha=1e-2, batch_size=256, epochs=600),
}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    dataset: str = "synthetic"        # synthetic | sbu | ntu
    data_path: str = ""               # SBU root directory
    fold: str = "1"                   # SBU test fold 1..5, or "all"
    topology: str = "sbu"             # built-in name or path to a topology file
    synthetic_train: int = 60
    synthetic_test: int = 20
    synthetic_sigma: float = 0.02
    synthetic_frames: int = 20
    d: int = 6
    n_clusters: int = 8
    k: int = 2
    k_prime: int = 1
    n_classes: int = 2
    kmeans_max_iter: int = 100
    frechet_method: str = "newton"
    metric: str = "airm"              # airm | trace
    beta_denominator: float = 0.0
    alpha: float = 1e-2
    lr_scale: float = 1.0             # multiplies alpha for every parameter group
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 30
    seed: int = 7
    no_pt: bool = False
    no_ltml: bool = False
    out: str = "runs/latest"

    def validate(self):
        if self.dataset not in ("synthetic", "sbu", "ntu"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "ntu":
            raise ConfigError("NTU loading is not supported; use dataset = sbu or synthetic")
        if self.dataset == "sbu" and not self.data_path:
            raise ConfigError("dataset = sbu needs data_path")
        if self.fold != "all" and self.fold not in {"1", "2", "3", "4", "5"}:
            raise ConfigError("fold must be 1..5 or 'all'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.synthetic_train < 1 or self.synthetic_test < 0 or self.synthetic_frames < 1:
            raise ConfigError("synthetic sizes must be positive")
        if self.synthetic_sigma < 0:
            raise ConfigError("synthetic_sigma must be non-negative")
        if self.lr_scale <= 0:
            raise ConfigError("lr_scale must be positive")
        if self.metric not in ("airm", "trace"):
            raise ConfigError("metric must be 'airm' or 'trace'")
        try:
            self.geomnet_config()
            self.adam_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def metric_config(self) -> MetricConfig:
        if self.metric == "airm":
            return MetricConfig()
        return MetricConfig(beta_denominator=self.beta_denominator, use_trace_term=True)

    def geomnet_config(self) -> GeomNetConfig:
        metric = self.metric_config()
        metric.validate(self.d + self.k)
        return GeomNetConfig(d=self.d, n_clusters=self.n_clusters, k=self.k,
                             k_prime=self.k_prime, n_classes=self.n_classes,
                             kmeans_seed=self.seed, kmeans_max_iter=self.kmeans_max_iter,
                             use_pt=not self.no_pt, use_ltml=not self.no_ltml,
                             metric=metric, frechet_method=self.frechet_method)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(alpha=self.alpha, eps=self.eps, beta1=self.beta1, beta2=self.beta2)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key, text):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return text


def parse_config(text: str) -> dict:
    """Key-value pairs of a config file (values still to be merged)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def build_config(file_values=None, overrides=None) -> RunConfig:
    """Preset, then config-file values, then command-line overrides."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    preset = merged.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = {**PRESETS[preset], **merged, "preset": preset}
    return RunConfig(**values).validate()


def load_config(path=None, overrides=None) -> RunConfig:
    file_values = {}
    if path is not None:
        try:
            file_values = parse_config(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(file_values, overrides)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in dataclasses.asdict(cfg).items())

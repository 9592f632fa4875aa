"""Experiment configuration and the shared context every command builds on."""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import os
from pathlib import Path
from typing import Any

import yaml

from .face import DEFAULT_REGIONS, FaceSample, load_dataset
from .models import (
    IdentitySplit,
    ModelHandle,
    VerificationPair,
    apply_thresholds,
    calibration_hash,
    load_registry,
    read_registry,
    save_toy_weights,
    split_identities,
    train_toy_model,
    verification_pairs,
    write_registry,
)
from .optimizer import OptimizationConfig
from .pattern import Palette, load_palette

ENV_PATHS = {
    "dataset": "ADVCAMO_DATASET",
    "registry": "ADVCAMO_REGISTRY",
    "thresholds": "ADVCAMO_THRESHOLDS",
    "palette": "ADVCAMO_PALETTE",
    "output": "ADVCAMO_OUTPUT",
}
ENV_SEED = "ADVCAMO_SEED"


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration (CLI exit code 2)."""


@dataclasses.dataclass
class ExperimentConfig:
    dataset: Path
    registry: Path
    output: Path = Path("runs")
    thresholds: Path | None = None
    palette: Path | None = None
    seed: int = 0
    pair_seed: int = 0  # non-mated pair sampling; fixed so --seed keeps calibrations valid
    optimization: OptimizationConfig = dataclasses.field(default_factory=OptimizationConfig)
    n_holdout: int = 2
    regions: tuple[str, ...] = DEFAULT_REGIONS
    evaluation: dict = dataclasses.field(default_factory=dict)
    recalibrate: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
        d["regions"] = list(self.regions)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:8]

    @property
    def thresholds_path(self) -> Path:
        return self.thresholds or self.registry.parent / "thresholds.json"

    def validate(self, need_palette: bool = False) -> None:
        for key in ("dataset", "registry"):
            path = getattr(self, key)
            if not path.exists():
                raise ConfigError(f"{key} path does not exist: {path}")
        if self.palette is not None and not self.palette.exists():
            raise ConfigError(f"palette path does not exist: {self.palette}")
        if (need_palette or self.optimization.mode == "constrained") and self.palette is None:
            raise ConfigError("constrained mode requires a palette path")


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Reads a YAML config; environment variables may override paths and seed."""
    doc: dict = {}
    root = Path.cwd()
    if path is not None:
        path = Path(path).resolve()
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
        root = path.parent
    for key, env in ENV_PATHS.items():
        if os.environ.get(env):
            doc[key] = os.environ[env]
    if os.environ.get(ENV_SEED):
        doc["seed"] = int(os.environ[ENV_SEED])
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    if "dataset" not in doc or "registry" not in doc:
        raise ConfigError("config must name a dataset manifest and a model registry")

    def resolve(v):
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else root / p

    opt = dict(doc.get("optimization", {}))
    seed = int(doc.get("seed", 0))
    opt.setdefault("seed", seed)
    if "seed" in (overrides or {}) and overrides["seed"] is not None:
        opt["seed"] = seed
    try:
        opt_cfg = OptimizationConfig(**opt)
    except TypeError as exc:
        raise ConfigError(f"bad optimization section: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        dataset=resolve(doc["dataset"]),
        registry=resolve(doc["registry"]),
        output=resolve(doc.get("output", "runs")),
        thresholds=resolve(doc.get("thresholds")),
        palette=resolve(doc.get("palette")),
        seed=seed,
        pair_seed=int(doc.get("pair_seed", 0)),
        optimization=opt_cfg,
        n_holdout=int(doc.get("n_holdout", 2)),
        regions=tuple(doc.get("regions", DEFAULT_REGIONS)),
        evaluation=dict(doc.get("evaluation", {})),
        recalibrate=bool(doc.get("recalibrate", False)),
    )


@dataclasses.dataclass
class Context:
    config: ExperimentConfig
    samples: list[FaceSample]
    splits: dict[str, IdentitySplit]
    pairs: list[VerificationPair]
    models: list[ModelHandle] = dataclasses.field(default_factory=list)

    @property
    def mated(self) -> list[VerificationPair]:
        return [p for p in self.pairs if p.mated]

    @property
    def calibration_hash(self) -> str:
        return calibration_hash(self.pairs)

    def model(self, name: str) -> ModelHandle:
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError(f"model {name!r} not in registry ({', '.join(m.name for m in self.models)})")

    @property
    def palette(self) -> Palette | None:
        return load_palette(self.config.palette) if self.config.palette else None


def build_context(cfg: ExperimentConfig, load_models: bool = True, thresholds: bool = True) -> Context:
    samples = load_dataset(cfg.dataset, regions=cfg.regions)
    splits = split_identities(samples, cfg.n_holdout)
    pairs = verification_pairs(splits, seed=cfg.pair_seed)
    ctx = Context(cfg, samples, splits, pairs)
    if load_models:
        ctx.models = load_registry(cfg.registry)
        if thresholds:
            if cfg.recalibrate:
                from .models import calibrate_threshold

                for m in ctx.models:
                    calibrate_threshold(m, pairs)
            else:
                path = cfg.thresholds_path
                if not path.exists():
                    raise ConfigError(f"no threshold sidecar at {path}; run 'advcamo calibrate' first")
                apply_thresholds(ctx.models, path, ctx.calibration_hash)
    return ctx


def run_directory(cfg: ExperimentConfig, command: str, out: Path | None = None) -> Path:
    root = out or cfg.output
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{stamp}-{cfg.digest()}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def make_toy_experiment(
    dest: str | Path,
    n_identities: int = 48,
    images_per_identity: int = 8,
    epochs: int = 40,
    n_models: int = 1,
    seed: int = 0,
) -> Path:
    """Generates the toy dataset, trains toy models and writes a ready config."""
    from .toyfaces import generate_dataset

    dest = Path(dest)
    manifest = generate_dataset(dest / "data", n_identities, images_per_identity, seed=seed)
    samples = load_dataset(manifest)
    (dest / "models").mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(n_models):
        name = "toy" if k == 0 else f"toy{k}"
        model = train_toy_model(samples, seed=seed + k, epochs=epochs, name=name)
        entries.append(save_toy_weights(model, dest / "models" / f"{name}.pt"))
    write_registry(entries, dest / "models" / "registry.yaml")
    palette = Palette(((34, 45, 29), (84, 98, 57), (140, 125, 90), (200, 190, 160)), 4.0)
    (dest / "palette.json").write_text(json.dumps(palette.to_dict(), indent=2) + "\n")
    config = {
        "dataset": "data/manifest.jsonl",
        "registry": "models/registry.yaml",
        "thresholds": "models/thresholds.json",
        "palette": "palette.json",
        "output": "runs",
        "seed": seed,
        "optimization": {"max_iterations": 500, "early_stop_window": 100, "batch_size": 32},
        "evaluation": {"n_patterns": 100, "n_identities": min(100, n_identities), "n_neighbors": 10},
    }
    path = dest / "experiment.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=False))
    return path


def registry_names(cfg: ExperimentConfig) -> list[str]:
    return [e["name"] for e in read_registry(cfg.registry)]

"""Experiment configuration and the run-directory pipeline.

A run directory holds::

    config.json  splits.json  history.csv  best.ckpt
    predictions.csv  metrics.json  timing.json  (+ figures and tables)
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .augment import AugmentationConfig, for_scale_at
from .data_ingest import CLASS_NAMES, SplitSpec, load_dataset, load_split, save_split, split_dataset
from .errors import ConfigError, InvalidSpec, TumorBenchError
from .preprocess import H5Cache, PreprocessConfig, build_cache

log = logging.getLogger(__name__)

CACHE_ENV = "TUMORBENCH_CACHE_DIR"
BACKBONES = ("xception", "resnet50v2", "inception_resnet_v2", "densenet201")


@dataclass(frozen=True)
class ReportOptions:
    formats: tuple = ("csv", "md")
    percent_decimals: int = 2


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int | None = None
    checkpoint_policy: str = "best_val_accuracy"


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str
    run_dir: str = "runs/default"
    backbone: str = "resnet50v2"
    weights: str | None = "imagenet"
    seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainSection = field(default_factory=TrainSection)
    report: ReportOptions = field(default_factory=ReportOptions)

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {list(BACKBONES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = self.split.to_dict()
        d["report"]["formats"] = list(self.report.formats)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        _check_keys("config", d, cls)
        if "data_dir" not in d:
            raise ConfigError("config needs 'data_dir'")
        kw = {k: v for k, v in d.items() if k not in ("split", "preprocess", "augmentation", "train", "report")}
        try:
            if "split" in d:
                kw["split"] = SplitSpec.from_dict(d["split"])
            if "preprocess" in d:
                _check_keys("preprocess", d["preprocess"], PreprocessConfig)
                kw["preprocess"] = PreprocessConfig(**d["preprocess"])
            if "augmentation" in d:
                kw["augmentation"] = AugmentationConfig.from_dict(d["augmentation"])
            if "train" in d:
                _check_keys("train", d["train"], TrainSection)
                kw["train"] = TrainSection(**d["train"])
            if "report" in d:
                _check_keys("report", d["report"], ReportOptions)
                rep = dict(d["report"])
                if "formats" in rep:
                    rep["formats"] = tuple(rep["formats"])
                kw["report"] = ReportOptions(**rep)
            return cls(**kw)
        except (InvalidSpec, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(payload)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Propagate one seed to splitting, head init, data order and augmentation."""
        return replace(self, seed=seed, split=replace(self.split, seed=seed), train=replace(self.train, seed=seed))

    def validate_paths(self) -> None:
        if not Path(self.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.data_dir} does not exist")

    def effective_augmentation(self) -> AugmentationConfig:
        return for_scale_at(self.augmentation, self.preprocess.scale_at)


def _check_keys(where: str, d, cls) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"'{where}' must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# pipeline steps


def dataset_fingerprint(data_dir) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(data_dir).glob("*.mat"), key=lambda p: p.name):
        h.update(f"{p.name}:{p.stat().st_size}\n".encode())
    return h.hexdigest()[:16]


def cache_path_for(cfg: ExperimentConfig, run_dir) -> Path:
    name = f"cache-{dataset_fingerprint(cfg.data_dir)}-{cfg.preprocess.cache_key()}.h5"
    base = os.environ.get(CACHE_ENV)
    return (Path(base) if base else Path(run_dir)) / name


def prepare_data(cfg: ExperimentConfig, run_dir):
    """Load the manifest, split it and build (or reuse) the preprocessed cache."""
    run_dir = Path(run_dir)
    manifest = load_dataset(cfg.data_dir)
    splits_file = run_dir / "splits.json"
    if splits_file.exists():
        split, _ = load_split(splits_file)
    else:
        split = split_dataset(manifest, cfg.split)
        save_split(split, cfg.split, splits_file)
    cache_file = cache_path_for(cfg, run_dir)
    if cache_file.exists():
        cache = H5Cache(cache_file)
    else:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        log.info("preprocessing %d records into %s", manifest.total, cache_file)
        cache = build_cache(manifest, cache_file, cfg.preprocess)
    return manifest, split, cache


def run_train(cfg: ExperimentConfig, run_dir=None):
    from .model import build_model
    from .train import TrainConfig, train

    run_dir = Path(run_dir or cfg.run_dir)
    cfg.validate_paths()
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    (run_dir / "config.sha256").write_text(cfg.config_hash() + "\n")
    _, split, cache = prepare_data(cfg, run_dir)
    handle = build_model(cfg.backbone, weights=cfg.weights, augmentation=cfg.effective_augmentation(),
                         seed=cfg.seed, input_shape=(cfg.preprocess.side, cfg.preprocess.side, 3))
    handle.preprocess = cfg.preprocess.to_dict()
    tcfg = TrainConfig(epochs=cfg.train.epochs, batch_size=cfg.train.batch_size, seed=cfg.train.seed,
                       early_stop_patience=cfg.train.early_stop_patience,
                       checkpoint_policy=cfg.train.checkpoint_policy)
    return train(handle, split, cache, tcfg, run_dir)


def load_run_config(run_dir) -> ExperimentConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise ConfigError(f"{run_dir} has no config.json")
    return ExperimentConfig.load(path)


def run_evaluate(run_dir, checkpoint=None):
    from .metrics import full_report
    from .model import load_model
    from .train import evaluate

    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    _, split, cache = prepare_data(cfg, run_dir)
    handle = load_model(checkpoint or run_dir / "best.ckpt")
    preds = evaluate(handle, split.test, cache, cfg.train.batch_size)
    preds.to_csv(run_dir / "predictions.csv")
    report = full_report(preds.y_true, preds.y_prob, CLASS_NAMES)
    metrics = report.to_dict()
    metrics["backbone"] = cfg.backbone
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    timing_file = run_dir / "timing.json"
    timing = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    timing.update({"predict_seconds": preds.wall_seconds, "n_images": len(preds.y_true)})
    timing_file.write_text(json.dumps(timing, indent=2) + "\n")
    return preds, report


def run_benchmark(run_dir, repeats: int = 3):
    from .model import load_model
    from .train import benchmark_predict

    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir)
    _, split, cache = prepare_data(cfg, run_dir)
    handle = load_model(run_dir / "best.ckpt")
    stats = benchmark_predict(handle, split.test, cache, repeats, cfg.train.batch_size)
    timing_file = run_dir / "timing.json"
    timing = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    timing["benchmark"] = stats
    timing.setdefault("predict_seconds", stats["median"])
    timing_file.write_text(json.dumps(timing, indent=2) + "\n")
    return stats


def predict_file(checkpoint, image_path) -> dict:
    """Classify one MAT record with a saved model."""
    import numpy as np

    from .augment import apply_augmentations
    from .data_ingest import parse_record
    from .model import load_model, predict
    from .preprocess import preprocess_pipeline

    handle = load_model(checkpoint)
    pcfg = PreprocessConfig(**handle.preprocess) if handle.preprocess else PreprocessConfig()
    rec = parse_record(Path(image_path))
    x = apply_augmentations(preprocess_pipeline(rec.image, pcfg), handle.augmentation, None, training=False)
    prob = predict(handle, x[None])[0]
    k = int(np.argmax(prob))
    return {
        "image": str(image_path),
        "label": CLASS_NAMES[k],
        "class_index": k,
        "probabilities": {name: float(p) for name, p in zip(CLASS_NAMES, prob)},
        "true_label": rec.label.value,
    }


__all__ = [
    "ExperimentConfig", "ReportOptions", "TrainSection", "prepare_data", "run_train", "run_evaluate",
    "run_benchmark", "predict_file", "load_run_config", "TumorBenchError",
]

"""Backbone reconstruction, fine-tuning head and model persistence.

The backbone is a Keras application built without its classification top, so it
ends at its final activation. The head is::

    GlobalAveragePooling2D -> BatchNorm -> Dense(1280, relu) -> BatchNorm -> Dense(3, softmax)

and the model is compiled with Adamax(1e-4) and sparse categorical
cross-entropy. The network consumes images already scaled to [0, 1]; the
augmentation config travels with the handle and with saved artifacts.
"""
from __future__ import annotations

import enum
import json
import os
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import h5py
import numpy as np

from .augment import AugmentationConfig
from .errors import (
    CorruptArtifact,
    ShapeError,
    ShapeIncompatible,
    UnknownBackbone,
    VersionMismatch,
    WeightsUnavailable,
)

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")
os.environ.setdefault("KERAS_BACKEND", "tensorflow")

import keras  # noqa: E402

FORMAT_NAME = "tumorbench-model"
FORMAT_VERSION = 1
WEIGHTS_ENV = "TUMORBENCH_WEIGHTS_DIR"
INPUT_SHAPE = (256, 256, 3)
NUM_CLASSES = 3


class BackboneKind(enum.Enum):
    XCEPTION = "xception"
    RESNET50V2 = "resnet50v2"
    INCEPTION_RESNET_V2 = "inception_resnet_v2"
    DENSENET201 = "densenet201"

    @classmethod
    def parse(cls, value) -> "BackboneKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UnknownBackbone(f"unknown backbone {value!r}; choose from {[k.value for k in cls]}") from None


# constructor name, ImageNet no-top weights file, URL sub-directory
_REGISTRY = {
    BackboneKind.XCEPTION: ("Xception", "xception_weights_tf_dim_ordering_tf_kernels_notop.h5", "xception"),
    BackboneKind.RESNET50V2: ("ResNet50V2", "resnet50v2_weights_tf_dim_ordering_tf_kernels_notop.h5", "resnet"),
    BackboneKind.INCEPTION_RESNET_V2: ("InceptionResNetV2",
                                       "inception_resnet_v2_weights_tf_dim_ordering_tf_kernels_notop.h5",
                                       "inception_resnet_v2"),
    BackboneKind.DENSENET201: ("DenseNet201", "densenet201_weights_tf_dim_ordering_tf_kernels_notop.h5", "densenet"),
}
_WEIGHTS_URL = "https://storage.googleapis.com/tensorflow/keras-applications/{}/{}"
TOTAL_STRIDE = 32


@dataclass(frozen=True)
class BackboneSpec:
    kind: BackboneKind
    weights_source: str | None
    trainable: bool = True
    input_shape: tuple = INPUT_SHAPE
    feature_depth: int = 0

    def __post_init__(self):
        h, w = self.input_shape[:2]
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ShapeIncompatible(f"input {self.input_shape} not divisible by stride {TOTAL_STRIDE}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass(frozen=True)
class HeadConfig:
    dense_units: int = 1280
    num_classes: int = NUM_CLASSES
    dense_seed: int = 1377
    out_init_range: float = 0.05
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3


@dataclass
class ModelHandle:
    backbone: BackboneSpec
    head: HeadConfig
    augmentation: AugmentationConfig
    model: keras.Model
    seed: int = 0
    learning_rate: float = 1e-4
    compiled: bool = False
    preprocess: dict | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def optimizer(self):
        return self.model.optimizer if self.compiled else None

    @property
    def loss_fn(self):
        return keras.losses.SparseCategoricalCrossentropy()

    def head_layer(self, name: str):
        return self.model.get_layer(name)

    def architecture(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "head": asdict(self.head),
            "seed": self.seed,
            "compile": {"optimizer": "adamax", "learning_rate": self.learning_rate,
                        "loss": "sparse_categorical_crossentropy", "metrics": ["accuracy"]},
            "keras_version": keras.__version__,
        }


def resolve_weights(kind: BackboneKind, allow_download: bool = True) -> Path:
    """Locate ImageNet no-top weights: ``$TUMORBENCH_WEIGHTS_DIR``, keras cache, then network."""
    _, fname, subdir = _REGISTRY[kind]
    candidates = []
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]) / fname)
    candidates.append(Path(os.environ.get("KERAS_HOME", Path.home() / ".keras")) / "models" / fname)
    for c in candidates:
        if c.is_file():
            return c
    if not allow_download:
        raise WeightsUnavailable(f"{fname} not found in {[str(c.parent) for c in candidates]}")
    try:
        return Path(keras.utils.get_file(fname, _WEIGHTS_URL.format(subdir, fname), cache_subdir="models"))
    except Exception as exc:
        raise WeightsUnavailable(
            f"could not obtain {fname}: no local copy (set {WEIGHTS_ENV}) and download failed ({exc})"
        ) from exc


def build_backbone(kind, weights="imagenet", trainable: bool = True, input_shape=INPUT_SHAPE,
                   seed: int = 0, allow_download: bool = True):
    """Return ``(BackboneSpec, extractor)`` for a classifier-free backbone.

    ``weights`` is ``"imagenet"``, ``None`` (seeded random init) or a path to a
    weights file.
    """
    kind = BackboneKind.parse(kind)
    ctor_name = _REGISTRY[kind][0]
    if weights == "imagenet":
        weights_path = resolve_weights(kind, allow_download)
    elif weights is None:
        weights_path = None
    else:
        weights_path = Path(weights)
        if not weights_path.is_file():
            raise WeightsUnavailable(f"weights file {weights_path} does not exist")
    keras.utils.set_random_seed(seed)
    extractor = getattr(keras.applications, ctor_name)(include_top=False, weights=None,
                                                       input_shape=tuple(input_shape))
    if weights_path is not None:
        extractor.load_weights(str(weights_path))
    extractor.trainable = trainable
    out_shape = extractor.output.shape
    spec = BackboneSpec(kind=kind, weights_source=str(weights_path) if weights_path else None,
                        trainable=trainable, input_shape=tuple(input_shape), feature_depth=int(out_shape[-1]))
    return spec, extractor


def attach_head(backbone: BackboneSpec, extractor, augmentation: AugmentationConfig | None = None,
                head: HeadConfig | None = None, seed: int = 0) -> ModelHandle:
    head = head or HeadConfig()
    if len(extractor.output.shape) != 4:
        raise ShapeIncompatible(f"backbone output must be 4-D, got {extractor.output.shape}")
    inputs = keras.Input(shape=backbone.input_shape, name="image")
    x = extractor(inputs)
    x = keras.layers.GlobalAveragePooling2D(name="gap")(x)
    x = keras.layers.BatchNormalization(momentum=head.bn_momentum, epsilon=head.bn_epsilon, name="bn1")(x)
    x = keras.layers.Dense(head.dense_units, activation="relu",
                           kernel_initializer=keras.initializers.GlorotUniform(seed=head.dense_seed),
                           bias_initializer="zeros", name="dense1")(x)
    x = keras.layers.BatchNormalization(momentum=head.bn_momentum, epsilon=head.bn_epsilon, name="bn2")(x)
    outputs = keras.layers.Dense(
        head.num_classes, activation="softmax",
        kernel_initializer=keras.initializers.RandomUniform(-head.out_init_range, head.out_init_range, seed=seed),
        bias_initializer="zeros", name="dense_out")(x)
    model = keras.Model(inputs, outputs, name=f"{backbone.kind.value}_tumor")
    return ModelHandle(backbone=backbone, head=head, augmentation=augmentation or AugmentationConfig(),
                       model=model, seed=seed)


def compile_model(handle: ModelHandle, learning_rate: float = 1e-4) -> ModelHandle:
    handle.model.compile(
        optimizer=keras.optimizers.Adamax(learning_rate=learning_rate),
        loss=keras.losses.SparseCategoricalCrossentropy(),
        metrics=["accuracy"],
    )
    handle.learning_rate = learning_rate
    handle.compiled = True
    return handle


def build_model(kind, weights="imagenet", augmentation=None, seed: int = 0, trainable: bool = True,
                learning_rate: float = 1e-4, allow_download: bool = True, input_shape=INPUT_SHAPE) -> ModelHandle:
    """Backbone + head + compile in one call."""
    spec, extractor = build_backbone(kind, weights=weights, trainable=trainable, input_shape=input_shape,
                                     seed=seed, allow_download=allow_download)
    return compile_model(attach_head(spec, extractor, augmentation, seed=seed), learning_rate)


def predict(handle: ModelHandle, batch, batch_size: int = 32) -> np.ndarray:
    """Inference-mode class probabilities for inputs already in [0, 1]."""
    x = np.asarray(batch, dtype=np.float32)
    expected = tuple(handle.backbone.input_shape)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected (batch, {', '.join(map(str, expected))}), got {x.shape}")
    if len(x) == 0:
        return np.zeros((0, handle.head.num_classes), dtype=np.float32)
    with handle._lock:
        chunks = [np.asarray(handle.model(x[i:i + batch_size], training=False))
                  for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks)


def head_parameter_counts(handle: ModelHandle) -> dict:
    """Trainable parameter counts of the head layers."""
    def trainable(name):
        return int(sum(np.prod(w.shape) for w in handle.model.get_layer(name).trainable_weights))
    return {name: trainable(name) for name in ("bn1", "dense1", "bn2", "dense_out")}


# ---------------------------------------------------------------------------
# persistence


def save_model(handle: ModelHandle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with h5py.File(tmp, "w") as f:
        f.attrs["format"] = FORMAT_NAME
        f.attrs["format_version"] = FORMAT_VERSION
        f.attrs["architecture"] = json.dumps(handle.architecture())
        f.attrs["augmentation"] = json.dumps(handle.augmentation.to_dict())
        f.attrs["keras_model"] = handle.model.to_json()
        if handle.preprocess is not None:
            f.attrs["preprocess"] = json.dumps(handle.preprocess)
        grp = f.create_group("weights")
        names = []
        for i, w in enumerate(handle.model.weights):
            grp.create_dataset(f"{i:06d}", data=np.asarray(w))
            names.append(w.path)
        grp.attrs["names"] = json.dumps(names)
    os.replace(tmp, path)
    return path


def read_artifact_metadata(path) -> dict:
    try:
        with h5py.File(path, "r") as f:
            if f.attrs.get("format") != FORMAT_NAME:
                raise CorruptArtifact(f"{path} is not a {FORMAT_NAME} artifact")
            version = int(f.attrs["format_version"])
            if version != FORMAT_VERSION:
                raise VersionMismatch(f"{path} has format version {version}, expected {FORMAT_VERSION}")
            return {
                "architecture": json.loads(f.attrs["architecture"]),
                "augmentation": json.loads(f.attrs["augmentation"]),
                "preprocess": json.loads(f.attrs["preprocess"]) if "preprocess" in f.attrs else None,
            }
    except (OSError, KeyError, ValueError) as exc:
        raise CorruptArtifact(f"cannot read model artifact {path}: {exc}") from exc


def load_model(path) -> ModelHandle:
    meta = read_artifact_metadata(path)
    arch = meta["architecture"]
    bb = arch["backbone"]
    spec, extractor = build_backbone(bb["kind"], weights=None, trainable=bb["trainable"],
                                     input_shape=tuple(bb["input_shape"]), seed=arch["seed"])
    spec = BackboneSpec(kind=spec.kind, weights_source=bb["weights_source"], trainable=spec.trainable,
                        input_shape=spec.input_shape, feature_depth=spec.feature_depth)
    handle = attach_head(spec, extractor, AugmentationConfig.from_dict(meta["augmentation"]),
                         head=HeadConfig(**arch["head"]), seed=arch["seed"])
    handle.preprocess = meta["preprocess"]
    try:
        with h5py.File(path, "r") as f:
            grp = f["weights"]
            values = [grp[k][()] for k in sorted(grp)]
    except (OSError, KeyError) as exc:
        raise CorruptArtifact(f"cannot read weights from {path}: {exc}") from exc
    variables = handle.model.weights
    if len(values) != len(variables):
        raise CorruptArtifact(f"{path} holds {len(values)} tensors, model expects {len(variables)}")
    for var, val in zip(variables, values):
        if tuple(var.shape) != val.shape:
            raise CorruptArtifact(f"tensor {var.path}: stored shape {val.shape} != {tuple(var.shape)}")
        var.assign(val)
    return compile_model(handle, arch["compile"]["learning_rate"])

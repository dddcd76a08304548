"""Deterministic datasets and trained-network fixtures."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .net import Activation, DenseLayer, Network, TrainConfig, accuracy, train_sgd

log = logging.getLogger(__name__)


class FixtureBuildError(RuntimeError):
    """A recipe trained below its accuracy floor."""


class DatasetFormatError(ValueError):
    """Malformed dataset CSV."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DatasetFormatError("features must be (n, d) with one label per row")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise DatasetFormatError("features must be finite")

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.num_classes)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.d)] + ["label"])
            for row, label in zip(self.features, self.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, num_classes: int | None = None) -> "Dataset":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        if not rows:
            raise DatasetFormatError(f"{path}: no data rows")
        width = len(rows[0])
        feats, labels = [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != width:
                raise DatasetFormatError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        return cls(np.array(feats), np.array(labels), path.stem, num_classes)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def make_blobs(d: int, k: int, n_per_class: int, separation: float = 10.0, seed: int = 0,
               std: float = 1.0) -> Dataset:
    """``k`` isotropic Gaussian clusters whose centres are pairwise at least ``separation`` apart."""
    if d < 1 or k < 2:
        raise ValueError("need d >= 1 and k >= 2")
    rng = np.random.default_rng(seed)
    centers = []
    spread = separation * k
    while len(centers) < k:
        cand = rng.uniform(-spread, spread, size=d)
        if all(np.linalg.norm(cand - other) >= separation for other in centers):
            centers.append(cand)
    centers = np.array(centers)
    features = np.concatenate([centers[i] + std * rng.standard_normal((n_per_class, d)) for i in range(k)])
    labels = np.repeat(np.arange(k), n_per_class)
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], f"blobs-d{d}-k{k}", k)


def load_digits_dataset(seed: int = 0) -> tuple[Dataset, Dataset]:
    """The 8x8 handwritten digits scaled to [0, 1], split 1400 train / rest test."""
    from sklearn.datasets import load_digits

    bunch = load_digits()
    x = bunch.data / 16.0
    y = bunch.target
    order = np.random.default_rng(seed).permutation(len(y))
    train, test = order[:1400], order[1400:]
    return (Dataset(x[train], y[train], "digits-train", 10),
            Dataset(x[test], y[test], "digits-test", 10))


def random_one_hidden_relu(d: int, units: int, k: int = 3, seed: int = 0) -> tuple[Network, np.ndarray]:
    """Random one-hidden-layer ReLU classifier plus a reference point near the origin."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((units, d))
    b = rng.standard_normal(units)
    v = rng.standard_normal((k, units))
    net = Network((DenseLayer(w, b, Activation("relu")), DenseLayer(v, np.zeros(k))))
    return net, 0.5 * rng.standard_normal(d)


def linear_classifier(weights, bias) -> Network:
    weights = np.asarray(weights, dtype=np.float64)
    return Network((DenseLayer(weights, bias),))


@dataclass(frozen=True)
class FixtureRecipe:
    name: str
    dataset: str
    hidden: tuple[int, ...]
    activations: tuple[str, ...]
    lr: float = 0.1
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    expected_train_acc_floor: float = 0.95
    data_args: dict = field(default_factory=dict)
    cap: float = 1.0
    # per-coordinate clamp for attacks; image-like data lives in [0, 1]
    input_box: tuple[float, float] | None = None

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def recipe_datasets(recipe: FixtureRecipe) -> tuple[Dataset, Dataset]:
    """Train and test sets named by a recipe."""
    if recipe.dataset == "blobs":
        args = {"d": 2, "k": 3, "n_per_class": 100, "separation": 10.0, "seed": recipe.seed, **recipe.data_args}
        full = make_blobs(**args)
        cut = int(0.8 * full.n)
        return full.subset(slice(0, cut), full.name + "-train"), full.subset(slice(cut, None), full.name + "-test")
    if recipe.dataset == "digits":
        return load_digits_dataset(recipe.data_args.get("seed", 0))
    raise ValueError(f"unknown dataset {recipe.dataset!r}")


def build_fixture(recipe: FixtureRecipe, out_dir: str | Path | None = None) -> tuple[Network, dict]:
    """Train the recipe's network; optionally write model, datasets and provenance files.

    Raises FixtureBuildError when training accuracy falls below the floor.
    """
    train, test = recipe_datasets(recipe)
    acts = [Activation(a, recipe.cap) for a in recipe.activations]
    cfg = TrainConfig(lr=recipe.lr, epochs=recipe.epochs, batch=recipe.batch, seed=recipe.seed)
    net = train_sgd(train.features, train.labels, recipe.hidden, acts, cfg, num_classes=train.num_classes)
    train_acc = accuracy(net, train.features, train.labels)
    test_acc = accuracy(net, test.features, test.labels)
    if train_acc < recipe.expected_train_acc_floor:
        raise FixtureBuildError(
            f"{recipe.name}: training accuracy {train_acc:.4f} below floor {recipe.expected_train_acc_floor}")
    model_text = json.dumps(net.to_dict(), separators=(",", ":"))
    provenance = {
        "recipe": asdict(recipe),
        "recipe_hash": recipe.digest(),
        "model_sha256": hashlib.sha256(model_text.encode()).hexdigest(),
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "seed": recipe.seed,
        "input_box": list(recipe.input_box) if recipe.input_box else None,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{recipe.name}.json").write_text(model_text)
        (out / f"{recipe.name}.provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
        train.to_csv(out / f"{recipe.name}.train.csv")
        test.to_csv(out / f"{recipe.name}.test.csv")
        log.info("built %s: train %.4f test %.4f", recipe.name, train_acc, test_acc)
    return net, provenance


DIGITS_BOX = (0.0, 1.0)

STANDARD_RECIPES = {
    r.name: r
    for r in (
        FixtureRecipe("blobs-linear", "blobs", (), (), epochs=20, expected_train_acc_floor=0.99,
                      data_args={"d": 2, "k": 2}),
        FixtureRecipe("blobs-relu16", "blobs", (16,), ("relu",), epochs=40, lr=0.05,
                      expected_train_acc_floor=0.99, data_args={"d": 2, "k": 3}),
        FixtureRecipe("blobs5-softplus", "blobs", (16,), ("softplus",), epochs=40, lr=0.05,
                      expected_train_acc_floor=0.99, data_args={"d": 5, "k": 3}),
        FixtureRecipe("digits-relu64", "digits", (64,), ("relu",), epochs=30, lr=0.1, input_box=DIGITS_BOX),
        FixtureRecipe("digits-relu3x64", "digits", (64, 64, 64), ("relu", "relu", "relu"), epochs=30, lr=0.05, input_box=DIGITS_BOX),
        FixtureRecipe("digits-softplus64", "digits", (64,), ("softplus",), epochs=30, lr=0.1, input_box=DIGITS_BOX),
        FixtureRecipe("digits-brelu64", "digits", (64,), ("brelu",), epochs=30, lr=0.1, input_box=DIGITS_BOX),
    )
}

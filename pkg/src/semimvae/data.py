"""Multi-view datasets: CSV ingestion, standardisation, label masking, synthetic data, minibatches."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .distributions import SeededRng
from .errors import ConfigError, IngestionError, IterationError, MaskingError

TRAIN, VALIDATION, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "validation", "test")
UNLABELED = -1
STD_FLOOR = 1e-8

_MANIFEST_KEYS = {"views", "labels", "splits", "num_classes"}


@dataclass
class ViewSpec:
    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"view {self.name!r} must have at least one feature")


@dataclass
class MultiViewBatch:
    """Aligned rows from every view, with labels only when they are observed."""

    views: list[np.ndarray]
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.views = [np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in self.views]
        if len({v.shape[0] for v in self.views}) > 1:
            raise IterationError("batch views have different row counts")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.size:
                raise IterationError("label count does not match batch size")

    @property
    def size(self) -> int:
        return self.views[0].shape[0] if self.views else 0

    @classmethod
    def empty(cls, view_dims) -> "MultiViewBatch":
        return cls([np.zeros((0, d)) for d in view_dims], np.zeros(0, dtype=np.int64))


@dataclass
class Standardizer:
    """Per-view column means and standard deviations from the training split."""

    means: list[np.ndarray]
    stds: list[np.ndarray]

    def apply(self, views) -> list[np.ndarray]:
        return [(np.asarray(x) - m) / s for x, m, s in zip(views, self.means, self.stds)]

    def to_dict(self) -> dict:
        return {"means": [m.tolist() for m in self.means], "stds": [s.tolist() for s in self.stds]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls([np.asarray(m) for m in d["means"]], [np.asarray(s) for s in d["stds"]])


@dataclass
class MultiViewDataset:
    """Row-aligned views with true labels, split tags and an observed-label mask.

    ``labels`` holds the ground truth (``-1`` where unknown). Only rows with
    ``label_mask`` set expose their label to training code.
    """

    views: list[np.ndarray]
    labels: np.ndarray
    splits: np.ndarray
    label_mask: np.ndarray
    num_classes: int
    view_specs: list[ViewSpec] = field(default_factory=list)
    standardized: bool = False

    def __post_init__(self):
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=np.int64)
        self.label_mask = np.asarray(self.label_mask, dtype=bool)
        n = self.labels.shape[0]
        if any(v.ndim != 2 or v.shape[0] != n for v in self.views):
            raise IngestionError("all views must be matrices with one row per label")
        if self.splits.shape != (n,) or self.label_mask.shape != (n,):
            raise IngestionError("splits and label_mask must have one entry per row")
        if not self.view_specs:
            self.view_specs = [ViewSpec(f"view{v}", x.shape[1]) for v, x in enumerate(self.views)]
        if len({s.name for s in self.view_specs}) != len(self.view_specs):
            raise IngestionError("view names must be unique")
        if np.any(self.label_mask & (self.labels < 0)):
            raise IngestionError("a row is marked observed but has no label")
        if np.any(self.labels >= self.num_classes):
            raise IngestionError("label out of range")
        held_out = self.splits != TRAIN
        if np.any(held_out & ~self.label_mask):
            raise IngestionError("validation/test rows must carry observed labels")

    @property
    def num_rows(self) -> int:
        return self.labels.shape[0]

    @property
    def view_dims(self) -> list[int]:
        return [x.shape[1] for x in self.views]

    def rows(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def labeled_pool(self) -> np.ndarray:
        """Indices of S_l: training rows with observed labels."""
        return np.flatnonzero((self.splits == TRAIN) & self.label_mask)

    def unlabeled_pool(self) -> np.ndarray:
        """Indices of S_u: training rows whose labels are hidden."""
        return np.flatnonzero((self.splits == TRAIN) & ~self.label_mask)

    def batch(self, idx, with_labels: bool) -> MultiViewBatch:
        idx = np.asarray(idx, dtype=np.int64)
        labels = None
        if with_labels:
            if not np.all(self.label_mask[idx]):
                raise IterationError("requested labels for rows whose labels are hidden")
            labels = self.labels[idx]
        return MultiViewBatch([x[idx] for x in self.views], labels)

    def class_counts(self, idx=None) -> np.ndarray:
        lab = self.labels if idx is None else self.labels[idx]
        return np.bincount(lab[lab >= 0], minlength=self.num_classes)

    def select_views(self, which) -> "MultiViewDataset":
        which = list(which)
        return replace(
            self,
            views=[self.views[v] for v in which],
            view_specs=[self.view_specs[v] for v in which],
        )


# -- ingestion ---------------------------------------------------------------


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path}: file is empty")
    return rows[0], rows[1:]


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    header, rows = _read_rows(path)
    out = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise IngestionError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        try:
            out[i] = [float(c) for c in row]
        except ValueError as exc:
            raise IngestionError(f"{path}:{line}: non-numeric cell ({exc})") from exc
    if not np.all(np.isfinite(out)):
        raise IngestionError(f"{path}: non-finite values")
    return header, out


def _read_column(path: Path) -> list[tuple[int, str]]:
    _, rows = _read_rows(path)
    out = []
    for i, row in enumerate(rows):
        if len(row) != 1:
            raise IngestionError(f"{path}:{i + 2}: expected a single column")
        out.append((i + 2, row[0].strip()))
    return out


def load_csv_views(manifest_path) -> MultiViewDataset:
    """Load a dataset described by a JSON manifest.

    The manifest lists ``views`` (objects with ``name`` and ``path``, in the
    declared order), a ``labels`` CSV (``-1`` marks unlabeled rows), an
    optional ``splits`` CSV of train/validation/test tags, and ``num_classes``.
    Relative paths resolve against the manifest's directory. Without a split
    file every row is a training row.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IngestionError(f"{manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{manifest_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(manifest, dict):
        raise IngestionError(f"{manifest_path}: manifest must be a JSON object")
    unknown = set(manifest) - _MANIFEST_KEYS
    if unknown:
        raise IngestionError(f"{manifest_path}: unknown keys {sorted(unknown)}")
    for key in ("views", "labels", "num_classes"):
        if key not in manifest:
            raise IngestionError(f"{manifest_path}: missing key {key!r}")
    K = manifest["num_classes"]
    if not isinstance(K, int) or K < 1:
        raise IngestionError(f"{manifest_path}: num_classes must be a positive integer")
    base = manifest_path.parent

    views, specs, counts = [], [], []
    for entry in manifest["views"]:
        if not isinstance(entry, dict) or set(entry) != {"name", "path"}:
            raise IngestionError(f"{manifest_path}: each view needs exactly 'name' and 'path'")
        path = base / entry["path"]
        _, mat = _read_matrix(path)
        views.append(mat)
        specs.append(ViewSpec(str(entry["name"]), mat.shape[1]))
        counts.append((path, mat.shape[0]))
    if not views:
        raise IngestionError(f"{manifest_path}: no views listed")

    label_path = base / manifest["labels"]
    labels = []
    for line, cell in _read_column(label_path):
        try:
            lab = int(cell)
        except ValueError as exc:
            raise IngestionError(f"{label_path}:{line}: non-integer label {cell!r}") from exc
        if lab < UNLABELED or lab >= K:
            raise IngestionError(f"{label_path}:{line}: label {lab} outside [0, {K}) and not -1")
        labels.append(lab)
    counts.append((label_path, len(labels)))

    if "splits" in manifest and manifest["splits"] is not None:
        split_path = base / manifest["splits"]
        splits = []
        for line, cell in _read_column(split_path):
            if cell not in SPLIT_NAMES:
                raise IngestionError(f"{split_path}:{line}: unknown split {cell!r}")
            splits.append(SPLIT_NAMES.index(cell))
        counts.append((split_path, len(splits)))
    else:
        splits = [TRAIN] * len(labels)

    if len({n for _, n in counts}) != 1:
        detail = ", ".join(f"{p} has {n} rows" for p, n in counts)
        raise IngestionError(f"row count mismatch: {detail}")

    labels = np.asarray(labels, dtype=np.int64)
    return MultiViewDataset(views, labels, np.asarray(splits), labels >= 0, K, specs)


def write_csv_views(dataset: MultiViewDataset, out_dir, expose_hidden: bool = False) -> Path:
    """Write view/label/split CSVs plus a manifest; returns the manifest path.

    Hidden labels are written as ``-1`` unless ``expose_hidden`` is set.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec, x in zip(dataset.view_specs, dataset.views):
        fname = f"{spec.name}.csv"
        with open(out_dir / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"{spec.name}_{j}" for j in range(spec.dim)])
            for row in x:
                w.writerow([repr(float(c)) for c in row])
        entries.append({"name": spec.name, "path": fname})
    labels = dataset.labels if expose_hidden else np.where(dataset.label_mask, dataset.labels, UNLABELED)
    with open(out_dir / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("label\n")
        fh.writelines(f"{int(v)}\n" for v in labels)
    with open(out_dir / "splits.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("split\n")
        fh.writelines(f"{SPLIT_NAMES[s]}\n" for s in dataset.splits)
    manifest = {
        "views": entries,
        "labels": "labels.csv",
        "splits": "splits.csv",
        "num_classes": dataset.num_classes,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# -- preprocessing -----------------------------------------------------------


def standardize(dataset: MultiViewDataset) -> tuple[MultiViewDataset, Standardizer]:
    """Z-score every feature column with training-split statistics."""
    if dataset.standardized:
        raise ValueError("dataset is already standardized")
    train = dataset.rows(TRAIN)
    if train.size == 0:
        raise ValueError("cannot standardize without training rows")
    means = [x[train].mean(axis=0) for x in dataset.views]
    stds = [np.maximum(x[train].std(axis=0), STD_FLOOR) for x in dataset.views]
    tf = Standardizer(means, stds)
    return replace(dataset, views=tf.apply(dataset.views), standardized=True), tf


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_labels(dataset: MultiViewDataset, labeled_fraction: float, seed) -> MultiViewDataset:
    """Keep a class-stratified random fraction of training labels observed.

    Each class keeps ``round(fraction * count)`` rows (halves round up).
    Validation and test rows are untouched.
    """
    if not 0 < labeled_fraction <= 1:
        raise MaskingError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    train_known = np.flatnonzero((dataset.splits == TRAIN) & (dataset.labels >= 0))
    mask = dataset.label_mask.copy()
    mask[dataset.splits == TRAIN] = False
    for c in range(dataset.num_classes):
        rows = train_known[dataset.labels[train_known] == c]
        if rows.size == 0:
            continue
        keep = _round_half_up(labeled_fraction * rows.size)
        if keep == 0:
            raise MaskingError(
                f"class {c} has {rows.size} training rows; fraction {labeled_fraction} leaves none labeled"
            )
        chosen = rows[rng.split(f"class{c}").permutation(rows.size)[:keep]]
        mask[chosen] = True
    return replace(dataset, label_mask=mask)


# -- synthetic data ----------------------------------------------------------


@dataclass
class SynthConfig:
    """Ancestral sampler settings: y ~ uniform, z ~ N(sep * offset_y, I), x = tanh(A z + sep * B y) + noise."""

    num_samples: int = 5000
    num_classes: int = 3
    latent_dim: int = 4
    view_dims: list[int] = field(default_factory=lambda: [20, 10])
    noise_scale: list[float] = field(default_factory=lambda: [0.6, 0.6])
    class_separation: float = 1.5
    noise_view_flags: list[bool] | None = None
    seed: int = 0

    def __post_init__(self):
        self.view_dims = [int(d) for d in self.view_dims]
        if isinstance(self.noise_scale, (int, float)):
            self.noise_scale = [float(self.noise_scale)] * len(self.view_dims)
        self.noise_scale = [float(s) for s in self.noise_scale]
        if self.noise_view_flags is None:
            self.noise_view_flags = [False] * len(self.view_dims)
        self.noise_view_flags = [bool(f) for f in self.noise_view_flags]
        if self.num_samples < 1 or self.num_classes < 1 or self.latent_dim < 1:
            raise ConfigError("num_samples, num_classes and latent_dim must be positive")
        if not self.view_dims or min(self.view_dims) < 1:
            raise ConfigError("view_dims must be non-empty and positive")
        if len(self.noise_scale) != len(self.view_dims) or len(self.noise_view_flags) != len(self.view_dims):
            raise ConfigError("noise_scale and noise_view_flags need one entry per view")
        if min(self.noise_scale) <= 0:
            raise ConfigError("noise_scale must be positive")
        if self.class_separation < 0:
            raise ConfigError("class_separation must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


def class_offsets(num_classes: int, latent_dim: int, rng: SeededRng) -> np.ndarray:
    """Unit-length class directions: basis vectors when they fit, random ones otherwise."""
    if num_classes <= latent_dim:
        return np.eye(latent_dim)[:num_classes]
    u = rng.normal((num_classes, latent_dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def make_synthetic(cfg: SynthConfig) -> MultiViewDataset:
    root = SeededRng(cfg.seed)
    maps_rng, draw_rng, split_rng = root.split("maps"), root.split("draws"), root.split("splits")
    n, K, d = cfg.num_samples, cfg.num_classes, cfg.latent_dim
    offsets = class_offsets(K, d, maps_rng.split("offsets"))

    y = draw_rng.integers(0, K, size=n)
    z = cfg.class_separation * offsets[y] + draw_rng.normal((n, d))
    views = []
    for v, (D, scale, is_noise) in enumerate(zip(cfg.view_dims, cfg.noise_scale, cfg.noise_view_flags)):
        vr = maps_rng.split(f"view{v}")
        A = vr.normal((D, d)) / np.sqrt(d)
        B = 0.25 * vr.normal((D, K))
        eps = draw_rng.split(f"view{v}").normal((n, D))
        if is_noise:
            views.append(eps)
        else:
            views.append(np.tanh(z @ A.T + cfg.class_separation * B[:, y].T) + scale * eps)

    order = split_rng.permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    splits = np.empty(n, dtype=np.int64)
    splits[order[:n_train]] = TRAIN
    splits[order[n_train : n_train + n_val]] = VALIDATION
    splits[order[n_train + n_val :]] = TEST
    specs = [ViewSpec(f"view{v}", D) for v, D in enumerate(cfg.view_dims)]
    return MultiViewDataset(views, y, splits, np.ones(n, dtype=bool), K, specs)


# -- minibatches -------------------------------------------------------------


def _cycled(order_rng: SeededRng, pool: np.ndarray, count: int) -> np.ndarray:
    """``count`` indices from ``pool``, reshuffling each time the pool is exhausted."""
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    reps = -(-count // pool.size)
    parts = [pool[order_rng.permutation(pool.size)] for _ in range(reps)]
    return np.concatenate(parts)[:count]


def minibatch_iter(
    dataset: MultiViewDataset,
    n_labeled: int,
    n_unlabeled: int,
    seed,
    epoch: int,
    labeled_idx=None,
    unlabeled_idx=None,
):
    """Yield ``(labeled, unlabeled)`` batches for one epoch.

    The pool that needs more batches is covered exactly once; the other one
    cycles with fresh shuffles. The final batch may be short. Pools default
    to S_l and S_u; pass ``unlabeled_idx`` to train on other rows (e.g. the
    test split in transductive mode).
    """
    if n_labeled < 0 or n_unlabeled < 0:
        raise IterationError("batch sizes must be non-negative")
    lab = dataset.labeled_pool() if labeled_idx is None else np.asarray(labeled_idx, dtype=np.int64)
    unl = dataset.unlabeled_pool() if unlabeled_idx is None else np.asarray(unlabeled_idx, dtype=np.int64)
    if n_labeled > 0 and lab.size == 0:
        raise IterationError("labeled pool is empty but labeled batch size is positive")
    if n_labeled == 0 and (n_unlabeled == 0 or unl.size == 0):
        raise IterationError("nothing to iterate over")
    use_unl = n_unlabeled > 0 and unl.size > 0

    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    ep = rng.split(f"epoch{epoch}")
    nb_l = -(-lab.size // n_labeled) if n_labeled > 0 else 0
    nb_u = -(-unl.size // n_unlabeled) if use_unl else 0

    if nb_l >= nb_u:
        n_batches = nb_l
        lab_order = lab[ep.split("labeled").permutation(lab.size)]
        unl_order = _cycled(ep.split("unlabeled"), unl, n_batches * n_unlabeled) if use_unl else None
    else:
        n_batches = nb_u
        unl_order = unl[ep.split("unlabeled").permutation(unl.size)]
        lab_order = _cycled(ep.split("labeled"), lab, n_batches * n_labeled) if n_labeled else None

    dims = dataset.view_dims
    for b in range(n_batches):
        if lab_order is not None:
            li = lab_order[b * n_labeled : (b + 1) * n_labeled]
            lb = dataset.batch(li, with_labels=True)
        else:
            lb = MultiViewBatch.empty(dims)
        if unl_order is not None:
            ui = unl_order[b * n_unlabeled : (b + 1) * n_unlabeled]
            ub = dataset.batch(ui, with_labels=False)
        else:
            ub = MultiViewBatch([np.zeros((0, d)) for d in dims])
        yield lb, ub

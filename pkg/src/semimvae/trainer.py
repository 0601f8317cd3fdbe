"""Semi-supervised training, validation-based model selection and experiment runs."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TEST, VALIDATION, MultiViewDataset, mask_labels, minibatch_iter, standardize
from .distributions import SeededRng
from .errors import ConfigError, TrainingError
from .model import ModelConfig, SemiMvaeModel, init_model
from .objective import ObjectiveConfig, batch_objective
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

MODES = ("inductive", "transductive")
RESULT_COLUMNS = ("fraction", "seed", "mode", "test_accuracy", "best_epoch", "beta", "lr")


@dataclass
class TrainConfig:
    epochs: int = 100
    n_labeled: int = 16
    n_unlabeled: int = 128
    beta: float = 0.1
    lr: float = 3e-4
    T: int = 1
    seed: int = 0
    early_stop_patience: int = 30
    mode: str = "inductive"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.n_labeled < 0 or self.n_unlabeled < 0 or self.n_labeled + self.n_unlabeled == 0:
            raise ConfigError("batch sizes must be non-negative and not both zero")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    labeled_elbo: float
    unlabeled_elbo: float
    class_loss: float
    val_accuracy: float
    view_weights: list[float]


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not math.isfinite(x) else x

        return {
            "best_epoch": self.best_epoch,
            "best_val_accuracy": clean(self.best_val_accuracy),
            "stopped_early": self.stopped_early,
            "records": [{k: clean(v) for k, v in asdict(r).items()} for r in self.records],
        }


def _weighted_mean(pairs) -> float:
    pairs = [(v, w) for v, w in pairs if w > 0 and math.isfinite(v)]
    if not pairs:
        return float("nan")
    return sum(v * w for v, w in pairs) / sum(w for _, w in pairs)


def train(model: SemiMvaeModel, dataset: MultiViewDataset, cfg: TrainConfig):
    """Optimise ``model`` on ``dataset``; returns ``(best_model, history)``.

    The returned model is a copy holding the parameters of the epoch with the
    best validation accuracy (earliest on ties). ``model`` itself ends at the
    final epoch's parameters.
    """
    if dataset.labeled_pool().size == 0:
        raise ValueError("training needs at least one labeled training row")
    if dataset.rows(VALIDATION).size == 0:
        raise ValueError("training needs a non-empty validation split")
    unlabeled_idx = dataset.rows(TEST) if cfg.mode == "transductive" else dataset.unlabeled_pool()

    root = SeededRng(cfg.seed)
    shuffle_rng, noise_rng = root.split("shuffle"), root.split("noise")
    ocfg = ObjectiveConfig(T=cfg.T, beta=cfg.beta)
    opt = AdamState(lr=cfg.lr)
    history = TrainHistory()
    best_model, best_acc, since_best = model.copy(), -1.0, 0

    for epoch in range(cfg.epochs):
        F, le, ue, cl = [], [], [], []
        batches = minibatch_iter(
            dataset, cfg.n_labeled, cfg.n_unlabeled, shuffle_rng, epoch, unlabeled_idx=unlabeled_idx
        )
        for b, (lb, ub) in enumerate(batches):
            res = batch_objective(model, lb, ub, noise_rng, ocfg, keep_grads=False)
            if not math.isfinite(res.value):
                raise TrainingError(f"non-finite objective at epoch {epoch}, batch {b}")
            adam_step(opt, model.parameters(), clip_norm=cfg.clip_norm)
            n = lb.size + ub.size
            F.append((res.value, n))
            le.append((res.labeled_elbo, lb.size))
            ue.append((res.unlabeled_elbo, ub.size))
            cl.append((res.class_loss, lb.size))

        acc = evaluate(model, dataset, VALIDATION)["accuracy"]
        history.records.append(
            EpochRecord(
                epoch=epoch,
                objective=_weighted_mean(F),
                labeled_elbo=_weighted_mean(le),
                unlabeled_elbo=_weighted_mean(ue),
                class_loss=_weighted_mean(cl),
                val_accuracy=acc,
                view_weights=model.view_weights().tolist(),
            )
        )
        if acc > best_acc:
            best_model, best_acc, since_best = model.copy(), acc, 0
            history.best_epoch, history.best_val_accuracy = epoch, acc
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                history.stopped_early = True
                log.debug("early stop at epoch %d", epoch)
                break
    return best_model, history


def predict(model: SemiMvaeModel, views) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(model.classify([np.atleast_2d(v) for v in views]), axis=1)


def evaluate(model: SemiMvaeModel, dataset: MultiViewDataset, split: int = TEST) -> dict:
    """Accuracy, per-class accuracy and confusion matrix (rows = true class) on one split."""
    idx = dataset.rows(split)
    if idx.size == 0:
        raise ValueError(f"split {split} has no rows")
    y = dataset.labels[idx]
    pred = predict(model, [x[idx] for x in dataset.views])
    K = model.num_classes
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[k, k] / support[k]) if support[k] else None for k in range(K)]
    return {
        "accuracy": float(np.mean(pred == y)),
        "per_class_accuracy": per_class,
        "confusion": conf.tolist(),
        "support": support.tolist(),
    }


def default_model_config(view_dims, num_classes: int, class_prior=None, **overrides) -> ModelConfig:
    """Paper-shaped networks, with widths capped by the data dimensionality."""
    cap = max(view_dims)
    kw = dict(
        view_dims=list(view_dims),
        num_classes=num_classes,
        latent_dim=min(30, cap),
        encoder_hidden=[min(100, cap), min(50, cap)],
        decoder_hidden=[min(50, cap), min(100, cap)],
        classifier_hidden=[min(100, sum(view_dims)), min(50, sum(view_dims))],
        class_prior=class_prior,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def empirical_class_prior(dataset: MultiViewDataset) -> list[float]:
    counts = dataset.class_counts(dataset.labeled_pool()).astype(np.float64)
    if np.any(counts == 0):
        raise ConfigError("every class needs at least one labeled row for the empirical prior")
    return (counts / counts.sum()).tolist()


def fit(
    dataset: MultiViewDataset,
    labeled_fraction: float,
    cfg: TrainConfig,
    model_overrides: dict | None = None,
    use_standardize: bool = True,
    uniform_prior: bool = False,
):
    """Standardise, mask, initialise, train and score one run.

    Returns ``(best_model, history, test_metrics)``. All randomness derives
    from ``cfg.seed`` through named streams.
    """
    root = SeededRng(cfg.seed)
    tf = None
    if use_standardize:
        dataset, tf = standardize(dataset)
    dataset = mask_labels(dataset, labeled_fraction, root.split("mask"))
    prior = None if uniform_prior else empirical_class_prior(dataset)
    mcfg = default_model_config(dataset.view_dims, dataset.num_classes, prior, **(model_overrides or {}))
    model = init_model(mcfg, root.split("init"))
    best, history = train(model, dataset, cfg)
    if tf is not None:
        best.extras["standardizer"] = tf.to_dict()
    metrics = evaluate(best, dataset, TEST)
    return best, history, metrics


def _fmt_fraction(f: float) -> str:
    return repr(float(f))


def run_experiment(spec: dict, out_dir, dataset: MultiViewDataset | None = None) -> dict:
    """Train and test every (labeled fraction, seed) pair; aggregate mean and sample std.

    ``spec`` keys: ``data`` (manifest path) unless ``dataset`` is given,
    ``fractions``, ``seeds``, ``mode``, and optional ``train`` / ``model``
    override dicts and ``standardize``. Writes ``results.csv``, one history
    JSON per run and ``summary.json`` into ``out_dir``.
    """
    from .data import load_csv_views

    allowed = {"data", "fractions", "seeds", "mode", "train", "model", "standardize"}
    unknown = set(spec) - allowed
    if unknown:
        raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
    if dataset is None:
        if "data" not in spec:
            raise ConfigError("experiment spec needs a 'data' manifest")
        dataset = load_csv_views(spec["data"])
    fractions = [float(f) for f in spec.get("fractions", [0.01, 0.02, 0.03])]
    seeds = [int(s) for s in spec.get("seeds", [0])]
    mode = spec.get("mode", "inductive")
    base = dict(spec.get("train", {}))
    base["mode"] = mode
    TrainConfig.from_dict(base)  # validate before any run starts

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failures = {}, []
    for fraction in fractions:
        for seed in seeds:
            cfg = TrainConfig.from_dict({**base, "seed": seed})
            try:
                _, history, metrics = fit(
                    dataset, fraction, cfg, spec.get("model"), spec.get("standardize", True)
                )
            except Exception as exc:  # a failed run is recorded, the rest continue
                log.warning("run fraction=%s seed=%s failed: %s", fraction, seed, exc)
                failures.append({"fraction": fraction, "seed": seed, "error": str(exc)})
                continue
            rows[(fraction, seed)] = {
                "fraction": fraction,
                "seed": seed,
                "mode": mode,
                "test_accuracy": metrics["accuracy"],
                "best_epoch": history.best_epoch,
                "beta": cfg.beta,
                "lr": cfg.lr,
            }
            hist_path = out / f"history_f{_fmt_fraction(fraction)}_s{seed}.json"
            hist_path.write_text(json.dumps(history.to_dict(), indent=1) + "\n")

    ordered = [rows[k] for k in sorted(rows)]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in ordered:
            w.writerow({**r, "test_accuracy": repr(r["test_accuracy"])})

    summary = {}
    for fraction in sorted(set(fractions)):
        accs = [r["test_accuracy"] for r in ordered if r["fraction"] == fraction]
        if not accs:
            continue
        summary[_fmt_fraction(fraction)] = {
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
            "runs": len(accs),
            "single_run": len(accs) == 1,
        }
    result = {"summary": summary, "failures": failures, "failed_runs": len(failures), "rows": ordered}
    (out / "summary.json").write_text(json.dumps(result, indent=1) + "\n")
    if failures:
        log.warning("%d run(s) failed; aggregated over completed runs", len(failures))
    return result

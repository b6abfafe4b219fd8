"""Training loop, grid search and the feature/label loading they share."""

from __future__ import annotations

import copy
import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import DatasetManifest, SampleRecord
from .errors import DataError, InvalidInputError, NumericalError
from .features import FeatureStats, Recipe, read_features
from .nn import TARGET_KEYS, Adam, ModelCheckpoint, adam_step, build_model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    initial_lr: float = 1e-3
    l2_lambda: float = 1e-4
    lr_patience: int = 25
    lr_factor: float = 0.5
    early_stop: Optional[int] = None
    seed: int = 0
    arch: Optional[dict] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch size must be >= 1")
        if not self.initial_lr > 0 or self.l2_lambda < 0:
            raise InvalidInputError("need lr > 0 and l2 >= 0")
        if not 0 < self.lr_factor < 1:
            raise InvalidInputError("lr factor must be in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def feature_path(features_dir, recipe, sample_id: str) -> Path:
    return Path(features_dir) / Recipe.parse(recipe).value / f"{sample_id}.rfp"


def stats_path(features_dir, recipe) -> Path:
    return Path(features_dir) / Recipe.parse(recipe).value / "stats.json"


def standardizer(stats: FeatureStats):
    """Row-wise (mean, std) vectors for a stacked feature layout."""
    mean = np.concatenate([np.full(c.bands, m) for c, m in zip(stats.channels, stats.mean)])
    std = np.concatenate([np.full(c.bands, s) for c, s in zip(stats.channels, stats.std)])
    return mean[:, None].astype(np.float32), std[:, None].astype(np.float32)


def load_features(records: Sequence[SampleRecord], features_dir, recipe,
                  stats: Optional[FeatureStats] = None) -> np.ndarray:
    """Stack the records' feature files into (N, rows, frames) float32, standardised if ``stats``."""
    if not records:
        raise InvalidInputError("no records to load")
    arrays = []
    channels = None
    for r in records:
        t = read_features(feature_path(features_dir, recipe, r.sample_id))
        if channels is None:
            channels = t.channels
        elif t.channels != channels:
            raise DataError(f"{r.sample_id}: feature layout differs from the rest of the split")
        arrays.append(t.values)
    x = np.stack(arrays).astype(np.float32)
    if stats is not None:
        if stats.channels != channels:
            raise DataError("feature statistics do not match the feature layout")
        mean, std = standardizer(stats)
        x -= mean
        x /= std
    return x


def target_matrix(records: Sequence[SampleRecord], target_mode: str,
                  normalization: Optional[Dict[str, float]] = None) -> np.ndarray:
    """Training targets: log labels, divided by the stored maxima in joint mode."""
    keys = TARGET_KEYS[target_mode]
    y = np.array([[r.labels[k] for k in keys] for r in records], dtype=np.float64)
    if target_mode == "joint":
        if not normalization:
            raise InvalidInputError("joint mode needs normalization constants")
        y = y / np.array([normalization[k] for k in keys])
    return y


# --------------------------------------------------------------------------
# Loop
# --------------------------------------------------------------------------

def loss_and_grad(pred: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Sum over targets of the per-target mean squared error."""
    diff = pred.astype(np.float64) - y
    n = diff.shape[0]
    loss = float(np.sum(np.mean(diff**2, axis=0)))
    return loss, 2.0 * diff / n


def eval_loss(model: ModelCheckpoint, x: np.ndarray, y: np.ndarray, batch_size: int = 32) -> float:
    pred = model.net.predict_raw(x, batch_size)
    return loss_and_grad(pred, y)[0]


def fit(model: ModelCheckpoint, x_train: np.ndarray, y_train: np.ndarray,
        x_val: np.ndarray, y_val: np.ndarray, config: TrainConfig,
        on_epoch: Optional[Callable[[dict], bool]] = None) -> List[dict]:
    """Adam on minibatches with reduce-on-plateau; keeps the best-validation weights.

    ``on_epoch`` receives each history row and may return True to stop early.
    """
    net = model.net
    opt = model.opt or Adam(net.params)
    model.opt = opt
    # Start the output at the training mean so early epochs fit shape, not offset.
    net.layers[-1].b[...] = y_train.mean(axis=0)
    net.version += 1

    lr = config.initial_lr
    best = math.inf
    best_state = None
    since_best = 0
    since_lr = 0
    history = []
    n = x_train.shape[0]
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        t0 = time.perf_counter()
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            pred, cache = net.forward(x_train[idx], train=True, rng=rng)
            loss, grad = loss_and_grad(pred, y_train[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"loss diverged at epoch {epoch} (lr={lr:g})")
            grads = net.backward(cache, grad, config.l2_lambda)
            try:
                adam_step(net, opt, grads, lr)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}: {exc}") from exc
            total += loss * len(idx)
        train_loss = total / n
        val_loss = eval_loss(model, x_val, y_val)
        if not math.isfinite(val_loss):
            raise NumericalError(f"validation loss diverged at epoch {epoch} (lr={lr:g})")
        if val_loss < best * (1 - 1e-4):
            best = val_loss
            best_state = ([p.copy() for p in net.params], epoch)
            since_best = 0
            since_lr = 0
        else:
            since_best += 1
            since_lr += 1
            if since_lr > config.lr_patience:
                lr *= config.lr_factor
                since_lr = 0
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
               "seconds": round(time.perf_counter() - t0, 3)}
        history.append(row)
        logger.info("epoch %d train=%.5f val=%.5f lr=%.2e", epoch, train_loss, val_loss, lr)
        if on_epoch is not None and on_epoch(row):
            break
        if config.early_stop is not None and since_best >= config.early_stop:
            break
    if best_state is not None:
        for p, saved in zip(net.params, best_state[0]):
            p[...] = saved
        net.version += 1
        model.config["best_epoch"] = best_state[1]
    model.config["best_val_loss"] = best
    return history


def train(manifest: DatasetManifest, features_dir, recipe, target_mode: str,
          config: TrainConfig, on_epoch=None, data=None) -> Tuple[ModelCheckpoint, List[dict]]:
    """Train a model on the manifest's train split, selecting on its val split.

    ``data`` may pass preloaded ``(x_train, x_val)`` arrays to skip disk reads.
    """
    recipe = Recipe.parse(recipe).value
    train_recs, val_recs = manifest.split("train"), manifest.split("val")
    if not train_recs or not val_recs:
        raise InvalidInputError("training needs nonempty train and val splits")
    stats = FeatureStats.from_json(_read_json(stats_path(features_dir, recipe)))
    if data is None:
        x_tr = load_features(train_recs, features_dir, recipe, stats)
        x_va = load_features(val_recs, features_dir, recipe, stats)
    else:
        x_tr, x_va = data
    y_tr = target_matrix(train_recs, target_mode, manifest.normalization)
    y_va = target_matrix(val_recs, target_mode, manifest.normalization)
    model = build_model(1, x_tr.shape[1], target_mode, input_frames=x_tr.shape[2],
                        seed=config.seed, recipe=recipe, arch=config.arch)
    model.normalization = dict(manifest.normalization) if target_mode == "joint" else {}
    model.feature_stats = stats.to_json()
    model.config.update({"train": config.to_json(), "manifest": manifest.meta.get("config_hash")})
    history = fit(model, x_tr, y_tr, x_va, y_va, config, on_epoch)
    return model, history


def _read_json(path):
    import json
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def grid_search(manifest: DatasetManifest, features_dir, recipe, target_mode: str,
                base: TrainConfig, axes: Dict[str, Sequence], epochs: Optional[int] = None
                ) -> Tuple[TrainConfig, List[dict]]:
    """Train every combination of ``axes`` (TrainConfig field -> values); pick the lowest val loss.

    ``epochs`` overrides the per-run budget, normally a reduced one.
    """
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise InvalidInputError("grid axes must be nonempty")
    for name in axes:
        if name not in TrainConfig.__dataclass_fields__:
            raise InvalidInputError(f"unknown grid axis {name!r}")
    recipe = Recipe.parse(recipe).value
    stats = FeatureStats.from_json(_read_json(stats_path(features_dir, recipe)))
    data = (load_features(manifest.split("train"), features_dir, recipe, stats),
            load_features(manifest.split("val"), features_dir, recipe, stats))
    names = list(axes)
    results = []
    best_cfg, best_loss = None, math.inf
    for combo in itertools.product(*(axes[k] for k in names)):
        cfg = copy.deepcopy(base)
        for k, v in zip(names, combo):
            setattr(cfg, k, type(getattr(base, k))(v) if getattr(base, k) is not None else v)
        if epochs is not None:
            cfg.epochs = epochs
        cfg.__post_init__()
        model, history = train(manifest, features_dir, recipe, target_mode, cfg, data=data)
        val = model.config["best_val_loss"]
        results.append({**dict(zip(names, combo)), "val_loss": val, "epochs_run": len(history)})
        logger.info("grid %s -> val %.5f", dict(zip(names, combo)), val)
        if val < best_loss:
            best_cfg, best_loss = cfg, val
    return best_cfg, results

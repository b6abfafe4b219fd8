"""Regression metrics and evaluation reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError

PHYSICAL = {"log10_volume": ("volume_m3", lambda v: 10.0 ** v),
            "log_rt60": ("rt60_s", np.exp)}


def _pairs(targets, estimates):
    y = np.asarray(targets, dtype=np.float64).ravel()
    yh = np.asarray(estimates, dtype=np.float64).ravel()
    if y.shape != yh.shape:
        raise InvalidInputError(f"targets and estimates differ in length: {y.size} vs {yh.size}")
    if y.size == 0:
        raise InvalidInputError("no pairs to evaluate")
    return y, yh


def mse(targets, estimates) -> float:
    y, yh = _pairs(targets, estimates)
    return float(np.mean((yh - y) ** 2))


def pearson(targets, estimates) -> float:
    """Sample correlation; raises when either side has zero variance."""
    y, yh = _pairs(targets, estimates)
    dy = y - y.mean()
    dh = yh - yh.mean()
    sy, sh = float(np.dot(dy, dy)), float(np.dot(dh, dh))
    if sy == 0 or sh == 0:
        raise InvalidInputError("correlation is undefined for a constant sequence")
    r = float(np.dot(dy, dh) / math.sqrt(sy * sh))
    return max(-1.0, min(1.0, r))


def mean_mult(targets, estimates) -> float:
    """``exp(mean |ln(estimate / target)|)`` for strictly positive values."""
    y, yh = _pairs(targets, estimates)
    if np.any(y <= 0) or np.any(yh <= 0):
        raise InvalidInputError("mean_mult needs strictly positive targets and estimates")
    return float(np.exp(np.mean(np.abs(np.log(yh / y)))))


def variance_ratio(targets, estimates) -> float:
    """Population variance of estimates over that of targets."""
    y, yh = _pairs(targets, estimates)
    vy = float(np.var(y))
    if vy == 0:
        raise InvalidInputError("variance ratio is undefined for constant targets")
    return float(np.var(yh)) / vy


@dataclass
class EvalReport:
    """Metrics for one target over one split.

    ``pairs`` are (target, estimate) in log-label space; MSE, rho and VR are
    computed there, MeanMult on the physical values.
    """

    target: str
    split: str
    pairs: List[tuple]
    mse: float
    pearson_rho: Optional[float]
    mean_mult: float
    variance_ratio: Optional[float]
    mean_mult_log: Optional[float] = None
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, target: str, split: str, y, yh, **extra) -> "EvalReport":
        y, yh = _pairs(y, yh)
        to_phys = PHYSICAL[target][1]
        try:
            rho = pearson(y, yh)
        except InvalidInputError:
            rho = None
        try:
            vr = variance_ratio(y, yh)
        except InvalidInputError:
            vr = None
        mm_log = mean_mult(y, yh) if np.all(y > 0) and np.all(yh > 0) else None
        return cls(target, split, list(zip(y.tolist(), yh.tolist())), mse(y, yh), rho,
                   mean_mult(to_phys(y), to_phys(yh)), vr, mm_log, dict(extra))

    def to_json(self) -> dict:
        return {
            "target": self.target,
            "split": self.split,
            "n": len(self.pairs),
            "metrics": {
                "mse": self.mse,
                "pearson_rho": self.pearson_rho,
                "mean_mult": self.mean_mult,
                "variance_ratio": self.variance_ratio,
                "mean_mult_log_labels": self.mean_mult_log,
            },
            "spaces": {
                "mse": "log label",
                "pearson_rho": "log label",
                "variance_ratio": "log label (population variance)",
                "mean_mult": PHYSICAL[self.target][0],
                "mean_mult_log_labels": "log label (only when all labels are positive)",
            },
            **self.extra,
        }

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["target", "estimate"])
            for y, yh in self.pairs:
                w.writerow([repr(y), repr(yh)])


def read_scatter(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[0]) for r in rows]), np.array([float(r[1]) for r in rows])


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def evaluate(model, manifest, features_dir, split: str, out_dir=None,
             checkpoint_path=None, manifest_path=None, group_by_snr: bool = False) -> List[EvalReport]:
    """Predict the split with ``model`` and report every target it estimates.

    When ``out_dir`` is set, writes ``report-<split>.json`` and one
    ``scatter-<split>-<target>.csv`` per target.
    """
    from .features import FeatureStats
    from .nn import outputs_to_labels
    from .train import load_features

    records = manifest.split(split)
    if not records:
        raise InvalidInputError(f"split {split!r} is empty")
    stats = FeatureStats.from_json(model.feature_stats) if model.feature_stats else None
    x = load_features(records, features_dir, model.recipe, stats)
    labels = outputs_to_labels(model, model.net.predict_raw(x))
    extra = {}
    if checkpoint_path is not None:
        extra["checkpoint_sha256"] = file_hash(checkpoint_path)
    if manifest_path is not None:
        extra["manifest_sha256"] = file_hash(manifest_path)
    reports = []
    for key, est in labels.items():
        y = np.array([r.labels[key] for r in records])
        rep = EvalReport.from_pairs(key, split, y, est, **extra)
        if group_by_snr:
            groups = {}
            for snr in sorted({r.snr_db for r in records}):
                sel = np.array([r.snr_db == snr for r in records])
                g = EvalReport.from_pairs(key, split, y[sel], est[sel])
                groups["+inf" if math.isinf(snr) else f"{snr:g}"] = g.to_json()["metrics"]
            rep.extra["by_snr"] = groups
        reports.append(rep)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {"split": split, "recipe": model.recipe, "target_mode": model.target_mode,
               "seed": model.config.get("seed"), "reports": [r.to_json() for r in reports]}
        (out / f"report-{split}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        for r in reports:
            r.write_csv(out / f"scatter-{split}-{r.target}.csv")
    return reports

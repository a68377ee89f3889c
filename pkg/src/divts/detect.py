"""Post-hoc OOD scores over a trained model: Mahalanobis, max class probability, ODIN.

All scores follow one polarity: higher means more in-distribution.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .diversify import EVAL_BATCH, _to_tensor, class_logits, embed
from .errors import MissingClass, MissingStats, SchemaMismatch, SingularCovariance
from .nn import Backbone, softmax_t

log = logging.getLogger(__name__)

SCORERS = ("mcp", "mah", "odin")
RIDGE_FLOOR = 1e-6


@dataclass
class GaussianStats:
    means: np.ndarray  # [C, b]
    cov: np.ndarray  # [b, b], unregularized
    inv: np.ndarray  # inverse of cov + ridge * I
    ridge: float
    counts: np.ndarray  # [C]
    classes: np.ndarray  # 1-based labels of the rows of ``means``

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["means"]), np.asarray(d["cov"]), np.asarray(d["inv"]), float(d["ridge"]),
                   np.asarray(d["counts"]), np.asarray(d["classes"]))


def _regularized_inverse(cov, ridge):
    b = len(cov)
    for _ in range(12):
        a = cov + ridge * np.eye(b)
        try:
            inv = np.linalg.inv(a)
        except np.linalg.LinAlgError:
            inv = None
        if inv is not None and np.all(np.isfinite(inv)) and np.linalg.cond(a) < 1e13:
            return inv, ridge
        new = max(ridge * 10, RIDGE_FLOOR)
        warnings.warn(f"covariance singular with ridge {ridge:g}; raising to {new:g}", RuntimeWarning)
        ridge = new
    raise SingularCovariance("covariance stays singular after raising the ridge")


def fit_gaussian_stats(z, y, classes=None, ridge: float | None = None, ridge_scale: float = 1e-3) -> GaussianStats:
    """Class means and tied covariance of embeddings ``z`` with 1-based labels ``y``.

    ``ridge=None`` uses ``ridge_scale * trace(cov) / b``.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y) if classes is None else np.asarray(classes)
    missing = [int(c) for c in classes if not np.any(y == c)]
    if missing:
        raise MissingClass(f"no training samples for classes {missing}")
    means = np.stack([z[y == c].mean(axis=0) for c in classes])
    counts = np.array([int(np.sum(y == c)) for c in classes])
    keep = np.isin(y, classes)
    centered = z[keep] - means[np.searchsorted(classes, y[keep])]
    cov = centered.T @ centered / keep.sum()
    cov = 0.5 * (cov + cov.T)
    if ridge is None:
        ridge = ridge_scale * np.trace(cov) / cov.shape[0]
    inv, ridge = _regularized_inverse(cov, float(ridge))
    return GaussianStats(means, cov, inv, ridge, counts, classes)


def fit_model_stats(model: Backbone, ds: Dataset, ridge=None, ridge_scale=1e-3) -> GaussianStats:
    """Fit on the step-4 bottleneck embeddings of the (ID-only) training split."""
    ids = ~ds.is_ood
    return fit_gaussian_stats(embed(model, ds.x[ids]), ds.y[ids], classes=np.asarray(ds.id_classes),
                              ridge=ridge, ridge_scale=ridge_scale)


def mahalanobis_all(stats: GaussianStats, z) -> np.ndarray:
    """Squared Mahalanobis distance of every row of ``z`` to every class mean: ``[N, C]``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    diff = z[:, None, :] - stats.means[None, :, :]
    return np.einsum("ncb,bd,ncd->nc", diff, stats.inv, diff)


def score_mahalanobis(stats: GaussianStats, z):
    """``max_c -(z - mu_c)^T inv (z - mu_c)``; returns ``(scores, nearest 1-based class)``."""
    d = mahalanobis_all(stats, z)
    return -d.min(axis=1), stats.classes[np.argmin(d, axis=1)]


def score_mcp(model: Backbone, x, T: float = 1.0):
    """Max temperature-softmax probability; returns ``(scores, predicted 1-based class)``."""
    logits = class_logits(model, x)
    probs = softmax_t(logits, T)
    return probs.max(axis=1), np.argmax(logits, axis=1) + 1


def odin_perturb(model: Backbone, x, T: float, eps: float) -> np.ndarray:
    """Step the input against the gradient of the loss at the predicted class, then clamp to [0, 1]."""
    x = np.asarray(x)
    if eps == 0:
        return x
    model.eval()
    out = []
    for i in range(0, len(x), EVAL_BATCH):
        xb = _to_tensor(x[i:i + EVAL_BATCH], model).requires_grad_(True)
        logits = model.class_logits(xb)
        pred = logits.argmax(dim=1)
        loss = torch.nn.functional.cross_entropy(logits / T, pred, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xb)
        xt = (xb.detach() - eps * torch.sign(grad)).clamp_(0.0, 1.0)
        out.append(xt.numpy().astype(x.dtype, copy=False))
    return np.concatenate(out) if out else x


def score_odin(model: Backbone, x, T: float = 1.0, eps: float = 1e-3):
    """MCP on the ODIN-perturbed input; predicted class is taken on the clean input."""
    _, pred = score_mcp(model, x, 1.0)
    scores, _ = score_mcp(model, odin_perturb(model, x, T, eps), T)
    return scores, pred


# ---------------------------------------------------------------------------
# batch detection and result files

@dataclass
class ScoreRecord:
    id: int
    scorer: str
    score: float
    pred_class: int
    is_ood_true: bool | None = None
    is_id: bool | None = None  # decision, when a threshold is applied

    def to_dict(self):
        d = {"id": self.id, "scorer": self.scorer, "score": self.score, "pred_class": self.pred_class}
        if self.is_ood_true is not None:
            d["is_ood_true"] = self.is_ood_true
        if self.is_id is not None:
            d["is_id"] = self.is_id
        return d


def scores_for(model, x, scorer, stats=None, T=1.0, eps=1e-3):
    """Raw ``(scores, pred_class)``; ``pred_class`` is always the step-4 argmax."""
    if scorer == "mcp":
        return score_mcp(model, x, T)
    if scorer == "odin":
        return score_odin(model, x, T, eps)
    if scorer == "mah":
        if stats is None:
            raise MissingStats("Mahalanobis scoring needs fitted Gaussian statistics")
        s, _ = score_mahalanobis(stats, embed(model, x))
        _, pred = score_mcp(model, x)
        return s, pred
    raise ValueError(f"unknown scorer {scorer!r}")


def quantile_threshold(val_scores, q: float = 0.05) -> float:
    return float(np.quantile(np.asarray(val_scores, dtype=np.float64), q))


def detect_batch(model, stats, ds: Dataset, scorer: str, threshold: float | None = None,
                 T: float = 1.0, eps: float = 1e-3) -> list[ScoreRecord]:
    if len(ds) == 0:
        return []
    scores, pred = scores_for(model, ds.x, scorer, stats, T, eps)
    truth = ds.is_ood if ds.ood_classes else None
    recs = []
    for i in range(len(ds)):
        rec = ScoreRecord(i, scorer, float(scores[i]), int(pred[i]),
                          None if truth is None else bool(truth[i]))
        if threshold is not None:
            rec.is_id = bool(scores[i] >= threshold)
        recs.append(rec)
    return recs


def write_results(records, path):
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def read_results(path) -> list[ScoreRecord]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"results file is not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise SchemaMismatch("results file must hold a JSON array")
    out = []
    for i, r in enumerate(raw):
        if not isinstance(r, dict) or not {"id", "scorer", "score", "pred_class"} <= set(r):
            raise SchemaMismatch(f"record {i} lacks required keys")
        if r["scorer"] not in SCORERS:
            raise SchemaMismatch(f"record {i}: unknown scorer {r['scorer']!r}")
        out.append(ScoreRecord(int(r["id"]), r["scorer"], float(r["score"]), int(r["pred_class"]),
                               r.get("is_ood_true"), r.get("is_id")))
    return out

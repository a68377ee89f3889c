"""DIVERSIFY training: pseudo domain-class labels, latent domain discovery, invariant learning.

Each round runs

1. ``e2`` epochs of the fine-grained feature update against labels
   ``s = d' * C + y`` (``d'`` from the previous round, all zero at first),
2. one pass of soft centroids -> nearest centroid -> hard centroids over the
   full training set to refresh ``d'``, then ``e3`` epochs of latent
   characterization (domain head + reversed class adversary),
3. ``e4`` epochs of domain-invariant learning (class head + reversed domain
   adversary against ``d'``),

followed by validation of the step-4 predictor. The best-validation weights
are returned. ERM and DANN share the backbone, schedule and checkpoint rule.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import ExperimentConfig
from .data import Dataset
from .errors import DegenerateWeights, LabelOutOfRange, NonFiniteLoss
from .nn import (
    BaselineModel,
    Backbone,
    DiversifyModel,
    cross_entropy,
    grad_reverse,
    make_optimizer,
    optimizer_step,
    softmax_t,
)
from .rng import torch_gen

log = logging.getLogger(__name__)

EVAL_BATCH = 512


# ---------------------------------------------------------------------------
# pseudo labels

def assign_domain_class_labels(y, d, C: int, K: int | None = None):
    """``s = d * C + y`` with 1-based ``y`` and 0-based ``d``; ``s`` is 1-based."""
    y = np.asarray(y, dtype=np.int64)
    d = np.asarray(d, dtype=np.int64)
    if y.size and (y.min() < 1 or y.max() > C):
        raise LabelOutOfRange(f"class labels must lie in 1..{C}")
    if d.size and (d.min() < 0 or (K is not None and d.max() >= K)):
        raise LabelOutOfRange("domain labels out of range")
    s = d * C + y
    return s if s.ndim else int(s)


def split_domain_class_labels(s, C: int):
    """Inverse of ``assign_domain_class_labels``: returns ``(d, y)``."""
    s = np.asarray(s, dtype=np.int64)
    if s.size and s.min() < 1:
        raise LabelOutOfRange("domain-class labels are 1-based")
    d, y = (s - 1) // C, (s - 1) % C + 1
    return (d, y) if s.ndim else (int(d), int(y))


# ---------------------------------------------------------------------------
# latent domain assignment

@dataclass
class LatentState:
    K: int
    centroids: np.ndarray  # [K, b]
    assignments: np.ndarray  # [N], 0..K-1
    initial_centroids: np.ndarray | None = None
    initial_assignments: np.ndarray | None = None
    reseeded: int = 0


def _l2_normalize(z):
    n = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.where(n == 0, 1, n)


def sq_distances(emb, centroids, normalize=False):
    emb = np.asarray(emb, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if normalize:
        emb, centroids = _l2_normalize(emb), _l2_normalize(centroids)
    diff = emb[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def assign_nearest(emb, centroids, normalize=False) -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the lowest index.

    With ``normalize`` both sides are L2-normalized first.
    """
    if not np.all(np.isfinite(centroids)):
        raise ValueError("centroids must be finite")
    return np.argmin(sq_distances(emb, centroids, normalize), axis=1)


def _reseed_empty(emb, centroids, members, normalize):
    """Move centroids flagged in ``~members`` onto the point farthest from its nearest live centroid."""
    centroids = centroids.copy()
    live = members.copy()
    n = 0
    for k in np.flatnonzero(~members):
        if live.any():
            dist = sq_distances(emb, centroids[live], normalize).min(axis=1)
            far = int(np.argmax(dist))
        else:
            far = 0
        centroids[k] = emb[far]
        live[k] = True
        n += 1
    return centroids, n


def init_centroids_soft(emb, weights, reseed=True, normalize=False):
    """Centroids as softmax-weighted means ``sum_i w_ik z_i / sum_i w_ik``.

    A domain whose total weight is below 1e-12 is re-seeded, or raises
    ``DegenerateWeights`` when ``reseed`` is false.
    """
    emb = np.asarray(emb, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    mass = w.sum(axis=0)
    ok = mass >= 1e-12
    if not ok.all() and not reseed:
        raise DegenerateWeights(f"domains {np.flatnonzero(~ok).tolist()} carry no weight")
    centroids = (w.T @ emb) / np.where(ok, mass, 1)[:, None]
    if not ok.all():
        centroids, _ = _reseed_empty(emb, centroids, ok, normalize)
    return centroids


def update_centroids_hard(emb, assignments, K: int, normalize=False):
    """Hard-indicator centroid means, then one nearest-centroid reassignment.

    Returns ``(centroids, new_assignments, n_reseeded)``.
    """
    emb = np.asarray(emb, dtype=np.float64)
    assignments = np.asarray(assignments)
    onehot = np.eye(K)[assignments]
    counts = onehot.sum(axis=0)
    members = counts > 0
    centroids = (onehot.T @ emb) / np.where(members, counts, 1)[:, None]
    n = 0
    if not members.all():
        centroids, n = _reseed_empty(emb, centroids, members, normalize)
    return centroids, assign_nearest(emb, centroids, normalize), n


def characterize_latent_domains(emb, domain_probs, normalize=True, refine_iters: int = 1) -> LatentState:
    """Soft centroid init, nearest-centroid labels, then ``refine_iters`` hard refinements."""
    emb = np.asarray(emb, dtype=np.float64)
    K = domain_probs.shape[1]
    if normalize:
        emb = _l2_normalize(emb)
    mu0 = init_centroids_soft(emb, domain_probs, reseed=True, normalize=normalize)
    d0 = assign_nearest(emb, mu0, normalize)
    d, n_total = d0, 0
    for _ in range(max(refine_iters, 1)):
        mu, d_new, n = update_centroids_hard(emb, d, K, normalize)
        n_total += n
        if np.array_equal(d_new, d):
            break
        d = d_new
    return LatentState(K, mu, d_new, mu0, d0, n_total)


# ---------------------------------------------------------------------------
# batched inference

def _to_tensor(x, model):
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@torch.no_grad()
def _batched(model, x, fn):
    model.eval()
    x = _to_tensor(x, model)
    outs = [fn(x[i:i + EVAL_BATCH]) for i in range(0, len(x), EVAL_BATCH)]
    return torch.cat(outs).cpu().numpy() if outs else np.zeros((0,))


def embed(model: Backbone, x) -> np.ndarray:
    return _batched(model, x, model.embed)


def class_logits(model: Backbone, x) -> np.ndarray:
    return _batched(model, x, model.class_logits)


def predict(model: Backbone, x, T: float = 1.0):
    """Step-4 predictor: ``(1-based classes, probability rows)``."""
    logits = class_logits(model, x)
    probs = softmax_t(logits, T)
    return np.argmax(logits, axis=1) + 1, probs


def latent_assignments(model: DiversifyModel, x, normalize=True, refine_iters: int = 1) -> LatentState:
    def fn(xb):
        z = model.step3_embed(xb)
        return torch.cat([z, torch.softmax(model.group3["head"](z), dim=1)], dim=1)

    out = _batched(model, x, fn)
    b = model.cfg.bottleneck_dim
    return characterize_latent_domains(out[:, :b], out[:, b:], normalize, refine_iters)


def accuracy_on(model, ds: Dataset) -> float:
    pred, _ = predict(model, ds.x)
    return float(np.mean(pred == ds.y))


# ---------------------------------------------------------------------------
# single optimization steps

def _check(loss, where):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()} in {where}")


def step2_feature_update(model: DiversifyModel, opt, x, y, d):
    """One step on cross-entropy against domain-class labels. ``y`` 1-based, ``d`` 0-based."""
    model.train()
    s = d * model.n_classes + y  # 1-based
    loss = cross_entropy(model.step2_logits(x), s - 1)
    _check(loss, "step 2")
    opt.zero_grad()
    loss.backward()
    optimizer_step(opt)
    return loss.item()


def step3_loss(model: DiversifyModel, x, y, d, lam1: float, freeze_featurizer=False):
    if freeze_featurizer:
        with torch.no_grad():
            feats = model.featurizer(x)
    else:
        feats = model.featurizer(x)
    z = model.group3["bottleneck"](feats)
    dom = cross_entropy(model.group3["head"](z), d)
    cls = cross_entropy(model.group3["adversary"](grad_reverse(z, lam1)), y - 1)
    return dom + cls


def step3_latent_characterization(model, opt, x, y, d, lam1, freeze_featurizer=False):
    model.train()
    loss = step3_loss(model, x, y, d, lam1, freeze_featurizer)
    _check(loss, "step 3")
    opt.zero_grad()
    loss.backward()
    optimizer_step(opt)
    return loss.item()


def step4_loss(model: Backbone, x, y, d, lam2: float, freeze_featurizer=False):
    if freeze_featurizer:
        with torch.no_grad():
            feats = model.featurizer(x)
    else:
        feats = model.featurizer(x)
    z = model.predictor.bottleneck(feats)
    cls = cross_entropy(model.predictor.classifier(z), y - 1)
    dom = cross_entropy(model.predictor.adversary(grad_reverse(z, lam2)), d)
    return cls + dom


def step4_invariant_learning(model, opt, x, y, d, lam2, freeze_featurizer=False):
    model.train()
    loss = step4_loss(model, x, y, d, lam2, freeze_featurizer)
    _check(loss, "step 4")
    opt.zero_grad()
    loss.backward()
    optimizer_step(opt)
    return loss.item()


def erm_step(model: Backbone, opt, x, y):
    model.train()
    loss = cross_entropy(model.class_logits(x), y - 1)
    _check(loss, "erm")
    opt.zero_grad()
    loss.backward()
    optimizer_step(opt)
    return loss.item()


# ---------------------------------------------------------------------------
# training loops

@dataclass
class TrainResult:
    model: Backbone
    history: list[dict]
    best_round: int
    best_val_acc: float
    latent: LatentState | None = None  # state of the selected round
    final_assignments: np.ndarray | None = None
    step_count: int = 0
    extras: dict = field(default_factory=dict)


def _batches(n, batch_size, gen):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _tensors(ds: Dataset):
    return torch.from_numpy(ds.x), torch.from_numpy(ds.y)


def train_diversify(train_ds: Dataset, val_ds: Dataset, cfg: ExperimentConfig,
                    on_round: Callable[[list], None] | None = None,
                    on_step: Callable[[str, Backbone], None] | None = None) -> TrainResult:
    if train_ds.ood_classes and train_ds.is_ood.any():
        raise LabelOutOfRange("training data contains OOD-class instances")
    C, K = train_ds.num_id_classes, cfg.K
    model = DiversifyModel(cfg.model_config(train_ds.channels, train_ds.window), C, K, seed=cfg.seed)
    ocfg = cfg.optim_config()
    frozen = cfg.freeze_featurizer_steps34
    frozen3 = frozen or cfg.freeze_featurizer_step3
    g2 = list(model.featurizer.parameters()) + list(model.group2.parameters())
    g3 = list(model.group3.parameters()) + ([] if frozen3 else list(model.featurizer.parameters()))
    g4 = list(model.predictor.parameters()) + ([] if frozen else list(model.featurizer.parameters()))
    opt2, opt3, opt4 = (make_optimizer(p, ocfg) for p in (g2, g3, g4))

    X, Y = _tensors(train_ds)
    n = len(X)
    gen = torch_gen(cfg.seed, "batch")
    d = torch.zeros(n, dtype=torch.long)
    history, best = [], (-1.0, 0, None, None)
    steps = 0

    def run(n_epochs, name, fn):
        nonlocal steps
        losses = []
        for _ in range(n_epochs):
            ep = []
            for i in _batches(n, cfg.batch_size, gen):
                ep.append(fn(i))
                if on_step:
                    on_step(name, model)
            losses.append(float(np.mean(ep)))
            steps += len(ep)
        return losses

    for r in range(1, cfg.rounds + 1):
        rec = {"round": r}
        losses2 = run(cfg.e2, "step2", lambda i: step2_feature_update(model, opt2, X[i], Y[i], d[i]))

        if not cfg.cluster_after_step3:
            latent = latent_assignments(model, train_ds.x, cfg.normalize_embeddings, cfg.refine_iters)
            d = torch.from_numpy(latent.assignments.astype(np.int64))
        losses3 = run(cfg.e3, "step3", lambda i: step3_latent_characterization(
            model, opt3, X[i], Y[i], d[i], cfg.lambda1, frozen3))
        if cfg.cluster_after_step3:
            latent = latent_assignments(model, train_ds.x, cfg.normalize_embeddings, cfg.refine_iters)
            d = torch.from_numpy(latent.assignments.astype(np.int64))
        losses4 = run(cfg.e4, "step4", lambda i: step4_invariant_learning(
            model, opt4, X[i], Y[i], d[i], cfg.lambda2, frozen))

        val_acc = accuracy_on(model, val_ds)
        if val_acc > best[0]:
            best = (val_acc, r, copy.deepcopy(model.state_dict()), latent)
        rec.update({
            "step2_loss": float(np.mean(losses2)) if losses2 else None,
            "step3_loss": float(np.mean(losses3)) if losses3 else None,
            "step4_loss": float(np.mean(losses4)) if losses4 else None,
            "step2_epoch_losses": losses2,
            "step3_epoch_losses": losses3,
            "step4_epoch_losses": losses4,
            "val_acc": val_acc,
            "best_val_acc": best[0],
            "cluster_sizes": np.bincount(latent.assignments, minlength=K).tolist(),
            "reseeded": latent.reseeded,
            "assignments": latent.assignments.tolist(),
        })
        history.append(rec)
        log.info("round %d: step2 %.4f step3 %s step4 %s val %.4f", r, rec["step2_loss"] or float("nan"),
                 rec["step3_loss"], rec["step4_loss"], val_acc)
        if on_round:
            on_round(history)

    final = history[-1]["assignments"]
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, history, best[1], best[0], best[3], np.asarray(final), steps)


def _train_baseline(train_ds, val_ds, cfg, adversarial: bool, on_round=None, on_step=None) -> TrainResult:
    if train_ds.ood_classes and train_ds.is_ood.any():
        raise LabelOutOfRange("training data contains OOD-class instances")
    C = train_ds.num_id_classes
    model = BaselineModel(cfg.model_config(train_ds.channels, train_ds.window), C,
                          cfg.K if adversarial else None, seed=cfg.seed)
    params = model.predictor_params()
    opt = make_optimizer(params, cfg.optim_config())
    X, Y = _tensors(train_ds)
    n = len(X)
    gen = torch_gen(cfg.seed, "batch")
    dgen = torch_gen(cfg.seed, "dann.domains")
    history, best = [], (-1.0, 0, None)
    steps = 0
    for r in range(1, cfg.rounds + 1):
        losses = []
        for _ in range(cfg.epochs_per_round):
            ep = []
            for i in _batches(n, cfg.batch_size, gen):
                if adversarial:
                    d = torch.randint(cfg.K, (len(i),), generator=dgen)
                    ep.append(step4_invariant_learning(model, opt, X[i], Y[i], d, cfg.lambda2))
                else:
                    ep.append(erm_step(model, opt, X[i], Y[i]))
                if on_step:
                    on_step("dann" if adversarial else "erm", model)
            losses.append(float(np.mean(ep)))
            steps += len(ep)
        val_acc = accuracy_on(model, val_ds)
        if val_acc > best[0]:
            best = (val_acc, r, copy.deepcopy(model.state_dict()))
        history.append({"round": r, "loss": float(np.mean(losses)), "epoch_losses": losses,
                        "val_acc": val_acc, "best_val_acc": best[0]})
        if on_round:
            on_round(history)
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, history, best[1], best[0], step_count=steps)


def baseline_erm(train_ds, val_ds, cfg, on_round=None, on_step=None) -> TrainResult:
    """Backbone trained with class cross-entropy only."""
    return _train_baseline(train_ds, val_ds, cfg, False, on_round, on_step)


def baseline_dann(train_ds, val_ds, cfg, on_round=None, on_step=None) -> TrainResult:
    """Class loss plus a reversed domain loss against uniformly random per-batch domain labels."""
    return _train_baseline(train_ds, val_ds, cfg, True, on_round, on_step)


TRAINERS = {"diversify": train_diversify, "erm": baseline_erm, "dann": baseline_dann}


def train(train_ds, val_ds, cfg: ExperimentConfig, **kw) -> TrainResult:
    return TRAINERS[cfg.algorithm](train_ds, val_ds, cfg, **kw)


def grid_search_k(train_ds, val_ds, cfg: ExperimentConfig, ks, **kw):
    """Train one model per K and keep the best by validation accuracy (first wins ties)."""
    results, best = {}, None
    for k in ks:
        res = train(train_ds, val_ds, cfg.updated(K=k), **kw)
        results[k] = res.best_val_acc
        if best is None or res.best_val_acc > best[1].best_val_acc:
            best = (k, res)
    return best[0], best[1], results

"""Slow, direct reference computations used only by the tests."""
import numpy as np
import torch


def auroc_pairwise(scores, is_id):
    s = np.asarray(scores, float)
    f = np.asarray(is_id, bool)
    pos, neg = s[f], s[~f]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def aupr_sweep(scores, is_id):
    s = np.asarray(scores, float)
    f = np.asarray(is_id, bool)
    n_pos = f.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        flagged = s >= t
        tp = np.sum(flagged & f)
        precision = tp / flagged.sum()
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def mahalanobis_per_class(z, means, inv):
    out = np.empty((len(z), len(means)))
    for i, zi in enumerate(z):
        for c, mu in enumerate(means):
            d = zi - mu
            out[i, c] = float(d @ inv @ d)
    return out


def nearest_brute(emb, centroids):
    out = []
    for e in emb:
        best, best_k = None, None
        for k, c in enumerate(centroids):
            dist = sum((a - b) ** 2 for a, b in zip(e, c))
            if best is None or dist < best:
                best, best_k = dist, k
        out.append(best_k)
    return np.array(out)


def fd_relative_error(loss_fn, params, n_coords=25, h=1e-6, seed=0):
    """Central differences on a random subset of coordinates of every tensor."""
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for i in idx:
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
                analytic.append(0.0 if g is None else g.view(-1)[i].item())
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)

"""Comparison losses over soft hash embeddings.

All three losses act on squared euclidean distance between embeddings in
(0, 1)^r, the smooth surrogate for Hamming distance on the quantized
codes, and use a hinge with margin 1 by default. Inputs are slot indices
into a shared (m, r) embedding matrix so gradients accumulate correctly
when the same image appears in several terms.

contrastive: sum over labelled pairs of
    a * d(x, y) + (1 - a) * max(0, margin - d(x, y))
with a = 1 for same identity.

triplet: sum over (anchor, positive, negative) of
    max(0, margin - (d(x, n) - d(x, p)))

structured: mean over positive pairs (x_i, y_i) of max(0, F_i),
    F_i = max(max_k max(0, margin - d(x_i, y_k)),
              max_l max(0, margin - d(y_i, y_l))) + d(x_i, y_i)
where y_k / y_l are mined gallery-view negatives for the query and match
side. Only the single most violating negative of the winning side gets
gradient; the query side wins ties.

The structured loss has two gradient modes. "exact" is the true
subgradient of the expression above. "shared-indicator" is a closed
form that shares one indicator across all four partials,
    I = [2 * margin + d(x_i, y_i) > d(x_i, y_k) + d(y_i, y_l)],
and reads
    dF/dx_i = (2 y_k - 2 y_i) I      dF/dy_i = (2 y_l - 2 x_i) I
    dF/dy_k = 2 x_i I                dF/dy_l = 2 y_i I
Note dF/dy_k drops a -2 y_k term relative to the exact subgradient; the
mode exists so the two update rules can be compared directly. Loss
values are identical in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StructuredPair:
    """One positive pair plus its mined negatives, as embedding slots."""

    x: int                    # query-view image
    y: int                    # matching gallery-view image
    neg_x: tuple[int, ...]    # gallery-view negatives scored against x
    neg_y: tuple[int, ...]    # gallery-view negatives scored against y


def _check_embeddings(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError(f"embeddings must be (m, r), got shape {e.shape}")
    return e


def contrastive_loss(embeddings, pairs, labels, margin: float = 1.0):
    """Returns (loss, grad) with grad shaped like embeddings.

    pairs is (n, 2) slot indices, labels is (n,) with 1 = same identity.
    """
    e = _check_embeddings(embeddings)
    pairs = np.asarray(pairs, dtype=np.intp)
    labels = np.asarray(labels)
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] == 0:
        raise ValueError("pairs must be a non-empty (n, 2) index array")
    if labels.shape != (pairs.shape[0],):
        raise ValueError("labels must match pairs")
    diff = e[pairs[:, 0]] - e[pairs[:, 1]]
    d = (diff ** 2).sum(axis=1)
    pos = labels.astype(bool)
    hinge = margin - d
    loss = float(d[pos].sum() + np.maximum(0.0, hinge[~pos]).sum())
    # coefficient on diff in dL/dE[p0]; negated for p1
    coef = np.where(pos, 2.0, np.where(hinge > 0, -2.0, 0.0))
    grad = np.zeros_like(e)
    np.add.at(grad, pairs[:, 0], coef[:, None] * diff)
    np.add.at(grad, pairs[:, 1], -coef[:, None] * diff)
    return loss, grad


def triplet_loss(embeddings, triplets, margin: float = 1.0):
    """Returns (loss, grad). triplets is (n, 3) = (anchor, positive, negative)."""
    e = _check_embeddings(embeddings)
    t = np.asarray(triplets, dtype=np.intp)
    if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] == 0:
        raise ValueError("triplets must be a non-empty (n, 3) index array")
    dp = e[t[:, 0]] - e[t[:, 1]]
    dn = e[t[:, 0]] - e[t[:, 2]]
    term = margin - (dn ** 2).sum(axis=1) + (dp ** 2).sum(axis=1)
    active = term > 0
    loss = float(term[active].sum())
    grad = np.zeros_like(e)
    a = active[:, None]
    np.add.at(grad, t[:, 0], np.where(a, 2.0 * dp - 2.0 * dn, 0.0))
    np.add.at(grad, t[:, 1], np.where(a, -2.0 * dp, 0.0))
    np.add.at(grad, t[:, 2], np.where(a, 2.0 * dn, 0.0))
    return loss, grad


def shared_indicator_gradients(x, y, y_k, y_l, margin: float = 1.0):
    """Closed-form partials for one structured term, one shared switch.

    Returns (grad_x, grad_y, grad_yk, grad_yl); all four share the
    indicator I = [2 * margin + d(x, y) > d(x, y_k) + d(y, y_l)].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    y_k = np.asarray(y_k, dtype=np.float64)
    y_l = np.asarray(y_l, dtype=np.float64)
    ind = 2.0 * margin + ((x - y) ** 2).sum() > \
        ((x - y_k) ** 2).sum() + ((y - y_l) ** 2).sum()
    i = float(ind)
    return ((2.0 * y_k - 2.0 * y) * i, (2.0 * y_l - 2.0 * x) * i,
            2.0 * x * i, 2.0 * y * i)


def structured_loss(embeddings, pairs, margin: float = 1.0,
                    grad_mode: str = "exact"):
    """Returns (loss, grad) for a batch of StructuredPair terms.

    grad_mode "exact" takes the true subgradient; "shared-indicator"
    applies the closed form documented in the module docstring to the most
    violating negative on each side. The loss value does not depend on the
    mode.
    """
    if grad_mode not in ("exact", "shared-indicator"):
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    e = _check_embeddings(embeddings)
    pairs = list(pairs)
    if not pairs:
        raise ValueError("structured loss needs at least one pair")
    for p in pairs:
        if not p.neg_x or not p.neg_y:
            raise ValueError(f"pair ({p.x}, {p.y}) has an empty negative set")

    inv = 1.0 / len(pairs)
    total = 0.0
    grad = np.zeros_like(e)
    for p in pairs:
        ex, ey = e[p.x], e[p.y]
        dpos = float(((ex - ey) ** 2).sum())
        dxk = ((ex - e[list(p.neg_x)]) ** 2).sum(axis=1)
        dyl = ((ey - e[list(p.neg_y)]) ** 2).sum(axis=1)
        k_best = int(np.argmin(dxk))   # smallest distance = largest hinge
        l_best = int(np.argmin(dyl))
        hx = max(0.0, margin - float(dxk[k_best]))
        hy = max(0.0, margin - float(dyl[l_best]))
        total += max(0.0, max(hx, hy) + dpos)

        if grad_mode == "shared-indicator":
            gx, gy, gk, gl = shared_indicator_gradients(
                ex, ey, e[p.neg_x[k_best]], e[p.neg_y[l_best]], margin)
            grad[p.x] += inv * gx
            grad[p.y] += inv * gy
            grad[p.neg_x[k_best]] += inv * gk
            grad[p.neg_y[l_best]] += inv * gl
        else:
            grad[p.x] += inv * 2.0 * (ex - ey)
            grad[p.y] += inv * -2.0 * (ex - ey)
            if hx >= hy:
                if hx > 0:
                    slot = p.neg_x[k_best]
                    grad[p.x] += inv * -2.0 * (ex - e[slot])
                    grad[slot] += inv * 2.0 * (ex - e[slot])
            elif hy > 0:
                slot = p.neg_y[l_best]
                grad[p.y] += inv * -2.0 * (ey - e[slot])
                grad[slot] += inv * 2.0 * (ey - e[slot])
    return total * inv, grad

"""Scalar loop reference implementations of every loss formula.

Everything here is deliberately plain: Python floats, ``math`` calls, and
explicit loops, with no arrays, no autodiff, and no numerical shortcuts
beyond the contractual clamps and floors. The verification suite and the
test oracles compare the vectorized implementations against these.
"""

from __future__ import annotations

import math

ARCCOS_EPS = 1e-7
LOG_FLOOR = 1e-12


def dot(a, b) -> float:
    total = 0.0
    for x, y in zip(a, b):
        total += float(x) * float(y)
    return total


def cosine_similarity(a, b) -> float:
    return min(1.0, max(-1.0, dot(a, b)))


def margin_similarity(a, b, margin: float, scale: float) -> float:
    sim = min(1.0 - ARCCOS_EPS, max(-1.0 + ARCCOS_EPS, dot(a, b)))
    angle = math.acos(sim) + margin
    angle = min(math.pi, max(0.0, angle))
    return scale * math.cos(angle)


def nce_estimator(target, positive, negatives, tau: float) -> float:
    num = math.exp(dot(positive, target) / tau)
    den = num
    for neg in negatives:
        den += math.exp(dot(neg, target) / tau)
    return num / den


def nce_estimator_margin(target, positive, negatives, tau: float,
                         margin: float, scale: float) -> float:
    num = math.exp(dot(positive, target) / tau)
    den = num
    for neg in negatives:
        den += math.exp(margin_similarity(neg, target, margin, scale) / tau)
    return num / den


def _second_term(target, negatives, tau, margin, scale, mode: str) -> float:
    # 1 - h is evaluated in ratio form; forming 1.0 - h would cancel
    # catastrophically when h approaches 1
    total = 0.0
    for j, neg in enumerate(negatives):
        if mode == "pairwise":
            logit = dot(neg, target) / tau
            one_minus_h = 1.0 / (math.exp(logit) + 1.0)
        else:
            num = math.exp(dot(neg, target) / tau)
            rest = 0.0
            for l, other in enumerate(negatives):
                if l != j:
                    rest += math.exp(margin_similarity(other, target, margin, scale) / tau)
            one_minus_h = rest / (num + rest)
        total += -math.log(max(one_minus_h, LOG_FLOOR))
    return total


def nce_anchor_loss(target, positive, negatives, tau: float, margin: float,
                    scale: float, second_term: str = "estimator") -> float:
    """One anchor's contrastive loss: alignment term plus repulsion sum."""
    h = nce_estimator_margin(target, positive, negatives, tau, margin, scale)
    return -math.log(h) + _second_term(target, negatives, tau, margin, scale, second_term)


def nce_loss_batch(targets, positives, negatives, tau: float, margin: float,
                   scale: float, second_term: str = "estimator") -> float:
    """Batch mean of per-anchor losses; negatives[i] is anchor i's noise set."""
    total = 0.0
    for i in range(len(targets)):
        total += nce_anchor_loss(targets[i], positives[i], negatives[i],
                                 tau, margin, scale, second_term)
    return total / len(targets)


def nce_total(image_loss: float, patch_loss: float, lam: float) -> float:
    return lam * image_loss + (1.0 - lam) * patch_loss


def cross_level_term(embedding, centroids, assignment: int, tau: float) -> float:
    """Softmax cross-entropy over centroids with the assigned one positive."""
    num = math.exp(dot(embedding, centroids[assignment]) / tau)
    den = 0.0
    for centroid in centroids:
        den += math.exp(dot(embedding, centroid) / tau)
    return -math.log(num / den)


def gcld_loss(image_embs, patch_embs, image_centroids, image_assign,
              patch_centroids, patch_assign, lam: float, tau: float) -> float:
    """Batch mean of the two cross-level terms per instance.

    The image embedding is discriminated over the patch-level centroids
    using its patch-level assignment, and vice versa.
    """
    total = 0.0
    n = len(image_embs)
    for i in range(n):
        img_term = cross_level_term(image_embs[i], patch_centroids, patch_assign[i], tau)
        pat_term = cross_level_term(patch_embs[i], image_centroids, image_assign[i], tau)
        total += lam * img_term + (1.0 - lam) * pat_term
    return total / n


def cpcd_loss(image_embs, patch_embs, positives, negatives,
              image_centroids, image_assign, patch_centroids, patch_assign,
              tau: float, margin: float, scale: float, lam: float,
              lam_prime: float, second_term: str = "estimator") -> float:
    img = nce_loss_batch(image_embs, positives, negatives, tau, margin, scale, second_term)
    pat = nce_loss_batch(patch_embs, positives, negatives, tau, margin, scale, second_term)
    nce = nce_total(img, pat, lam)
    if lam_prime == 0.0:
        return nce
    gcld = gcld_loss(image_embs, patch_embs, image_centroids, image_assign,
                     patch_centroids, patch_assign, lam, tau)
    return lam_prime * gcld + (1.0 - lam_prime) * nce


def quadratic_weighted_kappa(matrix) -> float:
    """Chance-corrected quadratic agreement from a confusion matrix."""
    n = len(matrix)
    total = 0.0
    row = [0.0] * n
    col = [0.0] * n
    for i in range(n):
        for j in range(n):
            row[i] += matrix[i][j]
            col[j] += matrix[i][j]
            total += matrix[i][j]
    observed = 0.0
    expected = 0.0
    for i in range(n):
        for j in range(n):
            w = ((i - j) / (n - 1)) ** 2 if n > 1 else 0.0
            observed += w * matrix[i][j]
            expected += w * row[i] * col[j] / total
    if expected == 0.0:
        return 1.0
    return 1.0 - observed / expected

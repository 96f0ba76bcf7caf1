"""The composite pretext-class discrimination objective.

Instance-level contrastive terms score each anchor against its memory-bank
positive and sampled negatives, with an additive angular margin widening
the gap to negatives. Group-level terms discriminate each embedding over
the other branch's cluster centroids. The composite loss blends the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DIAGNOSTICS, Tensor
from .bank import MemoryBank
from .clustering import ClusterModel, spherical_kmeans
from .encoder import EmbeddingBatch

LOG_FLOOR = 1e-12


@dataclass
class LossConfig:
    tau: float = 0.4
    margin: float = 0.5
    scale: float = 6.0
    lam: float = 0.5
    lam_prime: float = 0.5
    k_clusters: int = 4
    n_neg: int = 32
    kmeans_iters: int = 20
    second_term: str = "estimator"   # "estimator" | "pairwise"

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0,1], got {self.lam}")
        if not 0.0 <= self.lam_prime <= 1.0:
            raise ValueError(f"lambda' must lie in [0,1], got {self.lam_prime}")
        if self.k_clusters < 1:
            raise ValueError("k_clusters must be at least 1")
        if self.n_neg < 0:
            raise ValueError("n_neg must be non-negative")
        if self.second_term not in ("estimator", "pairwise"):
            raise ValueError(f"unknown second_term mode {self.second_term!r}")

    @property
    def margin_active(self) -> bool:
        return self.margin != 0.0 or self.scale != 1.0

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "margin": self.margin, "scale": self.scale,
            "lam": self.lam, "lam_prime": self.lam_prime,
            "k_clusters": self.k_clusters, "n_neg": self.n_neg,
            "kmeans_iters": self.kmeans_iters, "second_term": self.second_term,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)

    def for_arm(self, arm: str) -> "LossConfig":
        """Ablation arms: plain contrastive, plus grouping, plus margin."""
        d = self.to_dict()
        if arm == "nce":
            d.update(lam_prime=0.0, margin=0.0, scale=1.0)
        elif arm == "nce+gcld":
            d.update(margin=0.0, scale=1.0)
        elif arm == "cpcd":
            pass
        else:
            raise ValueError(f"unknown loss arm {arm!r}")
        return LossConfig(**d)


@dataclass
class LossDiagnostics:
    """Guard activations observed while evaluating one loss.

    ``margin_saturations`` counts negative logits whose margin-shifted
    angle hit the pi clamp, where the margin stops moving the logit.
    """

    arccos_clamps: int = 0
    log_floors: int = 0
    margin_saturations: int = 0


@dataclass
class LossBreakdown:
    nce_image: Tensor
    nce_patch: Tensor
    nce_total: Tensor
    gcld_image_term: Tensor
    gcld_patch_term: Tensor
    gcld: Tensor
    cpcd: Tensor
    diagnostics: LossDiagnostics = field(default_factory=LossDiagnostics)


def _unit_check(arr: np.ndarray, name: str, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(np.atleast_2d(arr), axis=-1)
    worst = np.abs(norms - 1.0).max()
    if worst > tol:
        raise ValueError(f"{name} must be unit-norm (worst deviation {worst:.3e})")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# contract-level scalar operations


def cosine_similarity(a, b) -> Tensor:
    _unit_check(_data(a), "a")
    _unit_check(_data(b), "b")
    return ad.clamp(ad.dot(a, b), -1.0, 1.0)


def margin_similarity(a, b, margin: float, scale: float) -> Tensor:
    """Cosine after adding ``margin`` to the pair's angle, rescaled."""
    if not 0.0 <= margin < math.pi / 2:
        raise ValueError(f"margin must lie in [0, pi/2), got {margin}")
    _unit_check(_data(a), "a")
    _unit_check(_data(b), "b")
    angle = ad.arccos(ad.dot(a, b))
    shifted = ad.clamp(ad.add(angle, margin), 0.0, math.pi)
    return ad.mul(ad.cos(shifted), scale)


def nce_estimator(target, positive, negatives, tau: float) -> Tensor:
    """Probability that (positive, target) is the matched pair."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _unit_check(_data(target), "target")
    _unit_check(_data(positive), "positive")
    negs = negatives if isinstance(negatives, Tensor) else np.asarray(negatives, dtype=np.float64)
    n = _data(negs).shape[0] if _data(negs).size else 0
    pos_logit = ad.div(ad.dot(positive, target), tau)
    if n == 0:
        num0 = ad.exp(ad.sub(pos_logit, pos_logit.item()))
        return ad.div(num0, num0)   # identically 1 with zero gradient
    _unit_check(_data(negs), "negatives")
    neg_logits = ad.div(ad.matmul(negs if isinstance(negs, Tensor) else Tensor(negs),
                                  ad.reshape(target, (_data(target).size, 1))), tau)
    shift = max(pos_logit.item(), float(_data(neg_logits).max()))
    num = ad.exp(ad.sub(pos_logit, shift))
    den = ad.add(num, ad.tensor_sum(ad.exp(ad.sub(neg_logits, shift))))
    return ad.div(num, den)


def nce_estimator_margin(target, positive, negatives, tau: float,
                         margin: float, scale: float) -> Tensor:
    """As ``nce_estimator`` but negative logits pass through the margin."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    _unit_check(_data(target), "target")
    _unit_check(_data(positive), "positive")
    negs_data = _data(negatives)
    n = negs_data.shape[0] if negs_data.size else 0
    pos_logit = ad.div(ad.dot(positive, target), tau)
    if n == 0:
        num0 = ad.exp(ad.sub(pos_logit, pos_logit.item()))
        return ad.div(num0, num0)   # identically 1 with zero gradient
    _unit_check(negs_data, "negatives")
    negs = negatives if isinstance(negatives, Tensor) else Tensor(negs_data)
    sims = ad.reshape(ad.matmul(negs, ad.reshape(target, (_data(target).size, 1))), (n,))
    shifted = ad.clamp(ad.add(ad.arccos(sims), margin), 0.0, math.pi)
    neg_logits = ad.div(ad.mul(ad.cos(shifted), scale), tau)
    shift = max(pos_logit.item(), float(neg_logits.data.max()))
    num = ad.exp(ad.sub(pos_logit, shift))
    den = ad.add(num, ad.tensor_sum(ad.exp(ad.sub(neg_logits, shift))))
    return ad.div(num, den)


# ---------------------------------------------------------------------------
# batch losses


def _margin_logits(sims: Tensor, cfg: LossConfig, diag: LossDiagnostics) -> Tensor:
    """Margin-adjusted, rescaled, temperature-divided negative logits."""
    if not cfg.margin_active:
        return ad.div(sims, cfg.tau)
    angles = ad.arccos(sims)
    diag.margin_saturations += int((angles.data + cfg.margin > math.pi).sum())
    shifted = ad.clamp(ad.add(angles, cfg.margin), 0.0, math.pi)
    return ad.div(ad.mul(ad.cos(shifted), cfg.scale), cfg.tau)


def _as_batch(arr, dim_hint: int | None = None) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim == dim_hint:
        out = out[None, ...]
    return out


def _nce_loss_batch(target: Tensor, positives: np.ndarray, negatives: np.ndarray,
                    cfg: LossConfig, diag: LossDiagnostics) -> Tensor:
    """Batch-mean contrastive loss for one branch.

    ``target`` is (B, d) unit rows in the graph; positives (B, d) and
    negatives (B, n, d) are detached memory-bank rows.
    """
    b, d = target.shape
    if positives.shape != (b, d):
        raise ad.ShapeMismatchError(f"positives shape {positives.shape} vs embeddings {(b, d)}")
    n = negatives.shape[1] if negatives.size else 0
    pos_logit = ad.div(ad.tensor_sum(ad.mul(target, positives), axis=1), cfg.tau)   # (B,)
    if n == 0:
        # h is identically 1 with no negatives, so the loss is 0 with zero gradient
        return ad.mul(ad.tensor_mean(pos_logit), 0.0)
    if negatives.shape != (b, n, d):
        raise ad.ShapeMismatchError(f"negatives shape {negatives.shape} vs {(b, n, d)}")

    target3 = ad.reshape(target, (b, 1, d))
    sims = ad.tensor_sum(ad.mul(target3, negatives), axis=2)                        # (B, n)
    marg_logits = _margin_logits(sims, cfg, diag)
    plain_logits = ad.div(sims, cfg.tau)

    # alignment term: -log h'(target; positive vs margin-shifted negatives)
    shift1 = np.maximum(pos_logit.data, marg_logits.data.max(axis=1))[:, None]      # (B, 1)
    num = ad.exp(ad.sub(ad.reshape(pos_logit, (b, 1)), shift1))
    den = ad.add(num, ad.tensor_sum(ad.exp(ad.sub(marg_logits, shift1)), axis=1, keepdims=True))
    first_term = ad.neg(ad.log(ad.reshape(ad.div(num, den), (b,))))                 # (B,)

    # repulsion term: each negative takes the positive slot in turn
    if cfg.second_term == "pairwise":
        one_minus = ad.div(1.0, ad.add(ad.exp(plain_logits), 1.0))                  # 1 - sigmoid
    else:
        shift2 = np.maximum(plain_logits.data.max(axis=1), marg_logits.data.max(axis=1))[:, None]
        exp_marg = ad.exp(ad.sub(marg_logits, shift2))                              # (B, n)
        exp_plain = ad.exp(ad.sub(plain_logits, shift2))
        off_diag = 1.0 - np.eye(n)
        rest = ad.matmul(exp_marg, Tensor(off_diag))    # (B, n): sum of the other negatives' terms
        one_minus = ad.div(rest, ad.add(exp_plain, rest))
    diag.log_floors += int((one_minus.data <= LOG_FLOOR).sum())
    second_term = ad.tensor_sum(ad.neg(ad.log(ad.clamp_min(one_minus, LOG_FLOOR))), axis=1)

    return ad.tensor_mean(ad.add(first_term, second_term))


def nce_loss_image(positives, embeddings, negatives, cfg: LossConfig) -> Tensor:
    """Image-branch contrastive loss against memory-bank rows."""
    target = embeddings.values if isinstance(embeddings, EmbeddingBatch) else embeddings
    if not isinstance(target, Tensor):
        target = Tensor(np.atleast_2d(np.asarray(target, dtype=np.float64)))
    elif target.ndim == 1:
        target = ad.reshape(target, (1, target.size))
    _unit_check(target.data, "embeddings")
    pos = _as_batch(positives, dim_hint=1)
    negs = _as_batch(negatives, dim_hint=2)
    _unit_check(pos, "positives")
    if negs.size:
        _unit_check(negs.reshape(-1, negs.shape[-1]), "negatives")
    return _nce_loss_batch(target, pos, negs, cfg, LossDiagnostics())


def nce_loss_patch(positives, embeddings, negatives, cfg: LossConfig) -> Tensor:
    """Patch-branch contrastive loss; identical contract to the image branch."""
    return nce_loss_image(positives, embeddings, negatives, cfg)


def nce_total(image_loss, patch_loss, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0,1], got {lam}")
    return ad.add(ad.mul(image_loss, lam), ad.mul(patch_loss, 1.0 - lam))


# ---------------------------------------------------------------------------
# group-wise cross-level discrimination


def _cross_level_batch(emb: Tensor, centroids: np.ndarray, assignments: np.ndarray,
                       tau: float) -> Tensor:
    b = emb.shape[0]
    k = centroids.shape[0]
    if assignments.shape[0] != b:
        raise ad.ShapeMismatchError(f"{assignments.shape[0]} assignments for batch of {b}")
    if assignments.min() < 0 or assignments.max() >= k:
        raise IndexError(f"assignment outside 0..{k - 1}")
    logits = ad.div(ad.matmul(emb, centroids.T), tau)                               # (B, k)
    shift = logits.data.max(axis=1, keepdims=True)
    log_z = ad.log(ad.tensor_sum(ad.exp(ad.sub(logits, shift)), axis=1))            # (B,)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), assignments] = 1.0
    pos = ad.tensor_sum(ad.mul(logits, onehot), axis=1)                             # (B,)
    return ad.tensor_mean(ad.sub(ad.add(log_z, shift.reshape(b)), pos))


def cross_level_term_image(embedding, patch_centroids: np.ndarray,
                           assignment: int, tau: float) -> Tensor:
    """Softmax cross-entropy of one image embedding over patch centroids."""
    vec = embedding if isinstance(embedding, Tensor) else Tensor(np.asarray(embedding, dtype=np.float64))
    row = ad.reshape(vec, (1, vec.size))
    return _cross_level_batch(row, np.asarray(patch_centroids, dtype=np.float64),
                              np.asarray([assignment]), tau)


def cross_level_term_patch(embedding, image_centroids: np.ndarray,
                           assignment: int, tau: float) -> Tensor:
    """Mirror of the image term with roles swapped."""
    return cross_level_term_image(embedding, image_centroids, assignment, tau)


def gcld_loss(image_emb, patch_emb, image_clusters: ClusterModel,
              patch_clusters: ClusterModel, lam: float, tau: float) -> Tensor:
    """Batch mean of the two cross-level terms.

    Each image embedding is discriminated over the patch-level centroids
    using its patch-level assignment, and each patch embedding over the
    image-level centroids using its image-level assignment; that keeps
    every positive index consistent with the centroid set in use without
    assuming the two clusterings share label order.
    """
    f = image_emb.values if isinstance(image_emb, EmbeddingBatch) else image_emb
    g = patch_emb.values if isinstance(patch_emb, EmbeddingBatch) else patch_emb
    if f.shape[0] != g.shape[0]:
        raise ad.ShapeMismatchError(f"batch sizes differ: {f.shape[0]} vs {g.shape[0]}")
    if image_clusters.k != patch_clusters.k:
        raise ValueError(f"cluster models disagree on k: {image_clusters.k} vs {patch_clusters.k}")
    image_term = _cross_level_batch(f, patch_clusters.centroids, patch_clusters.assignments, tau)
    patch_term = _cross_level_batch(g, image_clusters.centroids, image_clusters.assignments, tau)
    return ad.add(ad.mul(image_term, lam), ad.mul(patch_term, 1.0 - lam))


# ---------------------------------------------------------------------------
# composite objective


def sample_batch_negatives(bank: MemoryBank, ids, n_neg: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Stack per-anchor negative draws into a (B, n, d) block."""
    rows = [bank.sample_negatives(int(i), n_neg, rng)[1] for i in ids]
    return np.stack(rows) if n_neg else np.zeros((len(list(ids)), 0, bank.dim))


def cpcd_loss(image_emb: EmbeddingBatch, patch_emb: EmbeddingBatch, ids,
              bank: MemoryBank, cfg: LossConfig, rng: np.random.Generator,
              image_clusters: ClusterModel | None = None,
              patch_clusters: ClusterModel | None = None,
              negatives: np.ndarray | None = None) -> LossBreakdown:
    """Full objective over one embedded batch.

    Both branches must arrive normalized. Cluster models default to fresh
    spherical k-means runs on the detached embeddings; centroids and
    assignments are constants in the graph either way.
    """
    if not (image_emb.normalized and patch_emb.normalized):
        raise ValueError("cpcd_loss requires normalized embedding batches")
    ids = np.asarray(ids, dtype=int)
    f, g = image_emb.values, patch_emb.values
    if f.shape[0] != g.shape[0] or f.shape[0] != ids.shape[0]:
        raise ad.ShapeMismatchError(
            f"batch mismatch: {f.shape[0]} image rows, {g.shape[0]} patch rows, {ids.shape[0]} ids")

    clamps_before = DIAGNOSTICS.arccos_clamps
    diag = LossDiagnostics()

    positives = np.stack([bank.lookup_positive(int(i)) for i in ids])
    if negatives is None:
        negatives = sample_batch_negatives(bank, ids, cfg.n_neg, rng)

    nce_image = _nce_loss_batch(f, positives, negatives, cfg, diag)
    nce_patch = _nce_loss_batch(g, positives, negatives, cfg, diag)
    total = nce_total(nce_image, nce_patch, cfg.lam)

    if cfg.lam_prime > 0.0:
        if image_clusters is None:
            image_clusters = spherical_kmeans(f.data, cfg.k_clusters, cfg.kmeans_iters,
                                              seed=int(rng.integers(2 ** 31)))
        if patch_clusters is None:
            patch_clusters = spherical_kmeans(g.data, cfg.k_clusters, cfg.kmeans_iters,
                                              seed=int(rng.integers(2 ** 31)))
        image_term = _cross_level_batch(f, patch_clusters.centroids,
                                        patch_clusters.assignments, cfg.tau)
        patch_term = _cross_level_batch(g, image_clusters.centroids,
                                        image_clusters.assignments, cfg.tau)
        gcld = ad.add(ad.mul(image_term, cfg.lam), ad.mul(patch_term, 1.0 - cfg.lam))
    else:
        image_term = Tensor(0.0)
        patch_term = Tensor(0.0)
        gcld = Tensor(0.0)

    composite = ad.add(ad.mul(gcld, cfg.lam_prime), ad.mul(total, 1.0 - cfg.lam_prime))
    diag.arccos_clamps = DIAGNOSTICS.arccos_clamps - clamps_before
    return LossBreakdown(
        nce_image=nce_image, nce_patch=nce_patch, nce_total=total,
        gcld_image_term=image_term, gcld_patch_term=patch_term, gcld=gcld,
        cpcd=composite, diagnostics=diag,
    )

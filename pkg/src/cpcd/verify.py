"""Self-contained verification suite: pure math checks, no trained artifacts.

Covers gradient correctness of every primitive and of the full composite
loss, agreement of the vectorized losses with the scalar loop reference,
margin identities, cluster recovery, and memory-bank update behavior.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import oracle
from .autodiff import Tensor, backward, finite_difference_check
from .bank import MemoryBank
from .clustering import spherical_kmeans
from .encoder import (EncoderConfig, all_parameters, build_model, encode_image,
                      encode_patches, normalize_embeddings, project)
from .losses import (LossConfig, cpcd_loss, gcld_loss, nce_estimator,
                     nce_estimator_margin, sample_batch_negatives)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, max_error: float, detail: str = "") -> None:
        self.checks.append(CheckResult(name, passed, max_error, detail))

    def render(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f"  {c.detail}" if c.detail else ""
            lines.append(f"[{status}] {c.name}: max error {c.max_error:.3e}{extra}")
        verdict = "all checks passed" if self.passed else "FAILURES PRESENT"
        lines.append(f"=> {verdict}")
        return "\n".join(lines)


def _unit_rows(rng: np.random.Generator, *shape) -> np.ndarray:
    rows = rng.standard_normal(shape)
    return rows / np.linalg.norm(rows, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# primitive gradient checks


def _primitive_programs(rng: np.random.Generator):
    """(name, program, point) triples covering every differentiable primitive."""
    v = rng.standard_normal(6)
    m = rng.standard_normal((3, 4))
    m2 = rng.standard_normal((4, 3))
    pos = np.abs(rng.standard_normal(5)) + 0.5
    ang = rng.uniform(-0.9, 0.9, size=5)
    img = rng.standard_normal((2, 6, 6, 3))
    kern = rng.standard_normal((3, 3, 3, 2)) * 0.5
    bias = rng.standard_normal(2) * 0.1
    return [
        ("add", lambda t: ad.tensor_sum(ad.mul(ad.add(t[0], t[1]), v)), [v.copy(), v.copy()]),
        ("sub", lambda t: ad.tensor_sum(ad.mul(ad.sub(t[0], t[1]), v)), [v.copy(), 0.5 * v]),
        ("mul", lambda t: ad.tensor_sum(ad.mul(t[0], t[1])), [v.copy(), 0.3 * v + 1.0]),
        ("div", lambda t: ad.tensor_sum(ad.div(t[0], t[1])), [v.copy(), pos[:6] if pos.size >= 6 else np.abs(v) + 0.5]),
        ("matmul", lambda t: ad.tensor_sum(ad.matmul(t[0], t[1])), [m.copy(), m2.copy()]),
        ("dot", lambda t: ad.dot(t[0], t[1]), [v.copy(), 2.0 * v]),
        ("relu", lambda t: ad.tensor_sum(ad.mul(ad.relu(t[0]), v)), [v.copy()]),
        ("exp", lambda t: ad.tensor_sum(ad.exp(t[0])), [0.3 * v]),
        ("log", lambda t: ad.tensor_sum(ad.log(t[0])), [pos.copy()]),
        ("cos", lambda t: ad.tensor_sum(ad.cos(t[0])), [v.copy()]),
        ("arccos", lambda t: ad.tensor_sum(ad.arccos(t[0])), [ang.copy()]),
        ("sum_axis", lambda t: ad.tensor_sum(ad.mul(ad.tensor_sum(t[0], axis=1), np.arange(3.0))), [m.copy()]),
        ("mean", lambda t: ad.tensor_mean(ad.mul(t[0], m)), [m.copy()]),
        ("concat", lambda t: ad.tensor_sum(ad.mul(ad.concat([t[0], t[1]], axis=0), 1.5)), [v.copy(), 2.0 * v]),
        ("reshape", lambda t: ad.tensor_sum(ad.mul(ad.reshape(t[0], (4, 3)), 0.7)), [m.copy()]),
        ("l2_normalize", lambda t: ad.tensor_sum(ad.mul(ad.l2_normalize(t[0]), m)), [m + 2.0]),
        ("clamp", lambda t: ad.tensor_sum(ad.clamp(t[0], -0.5, 0.5)), [v.copy()]),
        ("clamp_min", lambda t: ad.tensor_sum(ad.clamp_min(t[0], 0.1)), [np.abs(v) + 0.2]),
        ("conv2d", lambda t: ad.tensor_sum(ad.conv2d(t[0], t[1], t[2], stride=2, pad=1)),
         [img.copy(), kern.copy(), bias.copy()]),
    ]


def check_primitives(report: VerificationReport, seed: int = 0, points: int = 10) -> None:
    base = np.random.default_rng(np.random.SeedSequence([seed, 0x9121]))
    worst_overall = 0.0
    failing = []
    for trial in range(points):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9121, trial]))
        for name, program, point in _primitive_programs(rng):
            fd = finite_difference_check(program, point, tolerance=1e-5)
            worst_overall = max(worst_overall, fd.max_rel_error)
            if not fd.passed:
                failing.append(f"{name}@{trial}")
    del base
    report.add("primitive gradients (10 random points each)", not failing,
               worst_overall, ", ".join(failing[:4]))


def check_normalize_orthogonality(report: VerificationReport, seed: int = 0) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0A71]))
    worst = 0.0
    for _ in range(50):
        x = Tensor(rng.standard_normal((4, 7)) * 2.0, requires_grad=True)
        y = ad.l2_normalize(x)
        loss = ad.tensor_sum(ad.mul(y, rng.standard_normal((4, 7))))
        backward(loss)
        inner = np.abs((x.grad * y.data).sum(axis=1)).max()
        worst = max(worst, float(inner))
    report.add("normalize gradient orthogonal to output rows", worst < 1e-9, worst)


# ---------------------------------------------------------------------------
# loss gradient checks (clusters frozen: they are graph constants)


def small_check_setup(seed: int = 0):
    """Tiny geometry for full-loss gradient checks: batch 4, dim 8, k 2."""
    cfg = LossConfig(tau=0.4, margin=0.5, scale=6.0, lam=0.5, lam_prime=0.5,
                     k_clusters=2, n_neg=2, kmeans_iters=10)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57E9]))
    bank = MemoryBank(12, 8, seed=seed)
    ids = np.array([0, 3, 5, 9])
    negatives = sample_batch_negatives(bank, ids, cfg.n_neg, rng)
    return cfg, bank, ids, negatives, rng


def check_loss_gradient_embeddings(report: VerificationReport, seed: int = 0) -> None:
    from .encoder import EmbeddingBatch

    cfg, bank, ids, negatives, rng = small_check_setup(seed)
    f0 = rng.standard_normal((4, 8))
    g0 = rng.standard_normal((4, 8))
    fbar = f0 / np.linalg.norm(f0, axis=1, keepdims=True)
    gbar = g0 / np.linalg.norm(g0, axis=1, keepdims=True)
    image_clusters = spherical_kmeans(fbar, cfg.k_clusters, cfg.kmeans_iters, seed=seed)
    patch_clusters = spherical_kmeans(gbar, cfg.k_clusters, cfg.kmeans_iters, seed=seed + 1)

    def program(tensors):
        f = EmbeddingBatch(ad.l2_normalize(tensors[0]), normalized=True, source="image")
        g = EmbeddingBatch(ad.l2_normalize(tensors[1]), normalized=True, source="patch")
        out = cpcd_loss(f, g, ids, bank, cfg, rng, image_clusters=image_clusters,
                        patch_clusters=patch_clusters, negatives=negatives)
        return out.cpcd

    fd = finite_difference_check(program, [f0, g0], tolerance=1e-5)
    report.add("composite loss gradient wrt embeddings (batch 4, d 8, k 2, 2 neg)",
               fd.passed, fd.max_rel_error)


def check_loss_gradient_parameters(report: VerificationReport, seed: int = 0) -> float:
    """Full pipeline gradient: pixels -> encoder -> heads -> loss, FD on params.

    The cluster models and negative draws are computed once and frozen, so
    the differentiated function and the finite-difference function agree.
    """
    start = time.time()
    enc_cfg = EncoderConfig(in_channels=3, conv_channels=(4,), feature_dim=8,
                            head_dim=8, patch_count=4)
    encoder, image_head, patch_head = build_model(enc_cfg, seed=seed)
    params = all_parameters(encoder, image_head, patch_head)
    names = sorted(params)
    cfg = LossConfig(tau=0.4, margin=0.5, scale=6.0, lam=0.5, lam_prime=0.5,
                     k_clusters=2, n_neg=2, kmeans_iters=10)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57EA]))
    bank = MemoryBank(12, 8, seed=seed)
    ids = np.array([0, 3, 5, 9])
    negatives = sample_batch_negatives(bank, ids, cfg.n_neg, rng)
    images = rng.uniform(0.0, 1.0, size=(4, 8, 8, 3))
    patches = rng.uniform(0.0, 1.0, size=(4, 4, 4, 4, 3))

    def loss_graph():
        f = normalize_embeddings(project(image_head, encode_image(encoder, images)))
        g = normalize_embeddings(project(patch_head, encode_patches(encoder, patches)))
        return cpcd_loss(f, g, ids, bank, cfg, rng, image_clusters=image_clusters,
                         patch_clusters=patch_clusters, negatives=negatives).cpcd

    f_base = normalize_embeddings(project(image_head, encode_image(encoder, images)))
    g_base = normalize_embeddings(project(patch_head, encode_patches(encoder, patches)))
    image_clusters = spherical_kmeans(f_base.data, cfg.k_clusters, cfg.kmeans_iters, seed=seed)
    patch_clusters = spherical_kmeans(g_base.data, cfg.k_clusters, cfg.kmeans_iters, seed=seed + 1)

    for p in params.values():
        p.grad = None
    backward(loss_graph())

    step = 1e-5
    worst = 0.0
    for name in names:
        tensor = params[name]
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        gflat = grad.reshape(-1)
        for coord in range(flat.size):
            orig = flat[coord]
            flat[coord] = orig + step
            up = loss_graph().item()
            flat[coord] = orig - step
            down = loss_graph().item()
            flat[coord] = orig
            fd_grad = (up - down) / (2 * step)
            err = abs(gflat[coord] - fd_grad) / max(1.0, abs(gflat[coord]), abs(fd_grad))
            worst = max(worst, err)
        tensor.grad = None
    elapsed = time.time() - start
    report.add("composite loss gradient wrt encoder and head parameters",
               worst < 1e-5 and elapsed < 60.0, worst, f"{elapsed:.1f}s")
    return worst


# ---------------------------------------------------------------------------
# oracle comparisons and margin identities


def check_oracle_equivalence(report: VerificationReport, seed: int = 0,
                             instances: int = 50) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0CA7]))
    worst = {"estimator": 0.0, "margin": 0.0, "anchor": 0.0, "gcld": 0.0, "composite": 0.0}
    for _ in range(instances):
        b = int(rng.integers(2, 9))
        d = int(rng.integers(4, 17))
        n = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        cfg = LossConfig(tau=float(rng.uniform(0.2, 1.2)),
                         margin=float(rng.uniform(0.0, 1.0)),
                         scale=float(rng.uniform(0.5, 6.0)),
                         lam=float(rng.uniform(0.0, 1.0)),
                         lam_prime=float(rng.uniform(0.0, 1.0)),
                         k_clusters=k, n_neg=n)
        f = _unit_rows(rng, b, d)
        g = _unit_rows(rng, b, d)
        pos = _unit_rows(rng, b, d)
        negs = _unit_rows(rng, b, n, d)
        centroids_img = _unit_rows(rng, k, d)
        centroids_pat = _unit_rows(rng, k, d)
        assign_img = rng.integers(0, k, size=b)
        assign_pat = rng.integers(0, k, size=b)

        h_vec = nce_estimator(f[0], pos[0], negs[0], cfg.tau).item()
        h_ref = oracle.nce_estimator(f[0], pos[0], negs[0], cfg.tau)
        worst["estimator"] = max(worst["estimator"], abs(h_vec - h_ref))

        hm_vec = nce_estimator_margin(f[0], pos[0], negs[0], cfg.tau, cfg.margin, cfg.scale).item()
        hm_ref = oracle.nce_estimator_margin(f[0], pos[0], negs[0], cfg.tau, cfg.margin, cfg.scale)
        worst["margin"] = max(worst["margin"], abs(hm_vec - hm_ref))

        from .losses import nce_loss_image

        loss_vec = nce_loss_image(pos, Tensor(f), negs, cfg).item()
        loss_ref = oracle.nce_loss_batch(f, pos, negs, cfg.tau, cfg.margin, cfg.scale)
        worst["anchor"] = max(worst["anchor"], abs(loss_vec - loss_ref))

        from .clustering import ClusterModel

        img_model = ClusterModel(centroids_img, assign_img)
        pat_model = ClusterModel(centroids_pat, assign_pat)
        g_vec = gcld_loss(Tensor(f), Tensor(g), img_model, pat_model, cfg.lam, cfg.tau).item()
        g_ref = oracle.gcld_loss(f, g, centroids_img, assign_img, centroids_pat,
                                 assign_pat, cfg.lam, cfg.tau)
        worst["gcld"] = max(worst["gcld"], abs(g_vec - g_ref))

        bank = MemoryBank(b + n + 1, d, seed=int(rng.integers(1 << 30)))
        for row, vec in enumerate(pos):
            bank.rows[row] = vec
        ids = np.arange(b)
        from .encoder import EmbeddingBatch

        out = cpcd_loss(EmbeddingBatch(Tensor(f), normalized=True),
                        EmbeddingBatch(Tensor(g), normalized=True, source="patch"),
                        ids, bank, cfg, rng, image_clusters=img_model,
                        patch_clusters=pat_model, negatives=negs)
        ref = oracle.cpcd_loss(f, g, pos, negs, centroids_img, assign_img,
                               centroids_pat, assign_pat, cfg.tau, cfg.margin,
                               cfg.scale, cfg.lam, cfg.lam_prime)
        worst["composite"] = max(worst["composite"], abs(out.cpcd.item() - ref))
    overall = max(worst.values())
    detail = " ".join(f"{k}={v:.2e}" for k, v in worst.items())
    report.add(f"vectorized losses vs scalar loop oracle ({instances} instances)",
               overall < 1e-9, overall, detail)


def check_margin_reduction(report: VerificationReport, seed: int = 0,
                           instances: int = 1000) -> None:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3ED0]))
    worst = 0.0
    for _ in range(instances):
        d = int(rng.integers(3, 17))
        n = int(rng.integers(1, 5))
        tau = float(rng.uniform(0.2, 1.5))
        target = _unit_rows(rng, d)
        positive = _unit_rows(rng, d)
        negs = _unit_rows(rng, n, d)
        plain = nce_estimator(target, positive, negs, tau).item()
        with_margin = nce_estimator_margin(target, positive, negs, tau, 0.0, 1.0).item()
        worst = max(worst, abs(plain - with_margin))
    report.add(f"margin estimator reduces to plain at m=0, s=1 ({instances} instances)",
               worst < 1e-12, worst)


def check_margin_monotonicity(report: VerificationReport) -> int:
    """-log h' must be non-increasing in the margin on a similarity grid."""
    violations = 0
    sims = np.linspace(-0.9, 0.9, 19)
    margins = [0.0, 0.25, 0.5]
    d = 4
    for scale in (1.0, 6.0):
        for pos_sim in (-0.5, 0.0, 0.5, 0.9):
            for neg_sim in sims:
                target = np.zeros(d)
                target[0] = 1.0
                positive = np.array([pos_sim, math.sqrt(1 - pos_sim ** 2), 0.0, 0.0])
                negative = np.array([[neg_sim, 0.0, math.sqrt(1 - neg_sim ** 2), 0.0]])
                losses = []
                for m in margins:
                    h = nce_estimator_margin(target, positive, negative, 0.4, m, scale).item()
                    losses.append(-math.log(h))
                for a, b in zip(losses, losses[1:]):
                    if b > a + 1e-12:
                        violations += 1
    report.add("anchor term non-increasing in margin over similarity grid",
               violations == 0, float(violations))
    return violations


# ---------------------------------------------------------------------------
# clustering and memory bank


def make_bundles(rng: np.random.Generator, n_bundles: int = 3, per_bundle: int = 20,
                 dim: int = 16, spread: float = 0.03) -> tuple[np.ndarray, np.ndarray]:
    """Well-separated unit-vector bundles with known membership."""
    directions, _ = np.linalg.qr(rng.standard_normal((dim, n_bundles)))
    points, labels = [], []
    for b in range(n_bundles):
        for _ in range(per_bundle):
            p = directions[:, b] + spread * rng.standard_normal(dim)
            points.append(p / np.linalg.norm(p))
            labels.append(b)
    return np.array(points), np.array(labels)


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Chance-corrected pair-counting agreement between two labelings."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    classes_a, classes_b = np.unique(a), np.unique(b)
    table = np.array([[(np.logical_and(a == ca, b == cb)).sum() for cb in classes_b]
                      for ca in classes_a], dtype=np.float64)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(np.float64(n))
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def check_kmeans_recovery(report: VerificationReport, seed: int = 0, trials: int = 10) -> None:
    successes = 0
    worst_ari = 1.0
    bad_geometry = 0
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB0D1, trial]))
        points, labels = make_bundles(rng)
        intra_ok = True
        for b in range(3):
            group = points[labels == b]
            sims = group @ group.T
            if sims[np.triu_indices(len(group), 1)].min() <= 0.95:
                intra_ok = False
        inter = max(float((points[labels == a] @ points[labels == b].T).max())
                    for a in range(3) for b in range(a + 1, 3))
        if not intra_ok or inter >= 0.3:
            bad_geometry += 1
            continue
        model = spherical_kmeans(points, 3, iters=20, seed=trial)
        ari = adjusted_rand_index(labels, model.assignments)
        worst_ari = min(worst_ari, ari)
        if ari == 1.0 and model.n_iters <= 20:
            successes += 1
    detail = f"{successes}/{trials}" + (f", {bad_geometry} bad constructions" if bad_geometry else "")
    report.add(f"spherical k-means recovers 3 bundles ({trials} seeds)",
               successes == trials, 1.0 - worst_ari, detail)


def check_memory_bank(report: VerificationReport, seed: int = 0) -> None:
    bank = MemoryBank(4, 2, seed=seed)
    bank.rows[1] = np.array([1.0, 0.0])
    bank.update_epoch({1: np.array([0.0, 1.0])})
    expected = np.array([math.sqrt(0.5), math.sqrt(0.5)])
    err_example = float(np.abs(bank.rows[1] - expected).max())

    bank2 = MemoryBank(3, 8, seed=seed + 1)
    target = np.zeros(8)
    target[0] = 1.0
    angle = math.pi
    for _ in range(20):
        bank2.update_epoch({0: target})
        cosv = float(np.clip(bank2.rows[0] @ target, -1.0, 1.0))
        angle = math.acos(cosv)
    norm_err = float(np.abs(np.linalg.norm(bank2.rows, axis=1) - 1.0).max())
    passed = err_example < 1e-8 and angle < 1e-3 and norm_err < 1e-9
    report.add("memory bank: worked average, convergence, unit rows", passed,
               max(err_example, angle, norm_err))


def run_verification(seed: int = 0, heavy: bool = True) -> VerificationReport:
    report = VerificationReport()
    check_primitives(report, seed)
    check_normalize_orthogonality(report, seed)
    check_loss_gradient_embeddings(report, seed)
    if heavy:
        check_loss_gradient_parameters(report, seed)
    check_oracle_equivalence(report, seed)
    check_margin_reduction(report, seed)
    check_margin_monotonicity(report)
    check_kmeans_recovery(report, seed)
    check_memory_bank(report, seed)
    return report

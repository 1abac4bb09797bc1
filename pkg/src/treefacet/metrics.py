"""Clustering and density metrics for fitted models.

Accuracy is the best one-to-one matching between predicted clusters and
labels (exact assignment solve, not a permutation scan).  Facet
agreement uses normalized mutual information on the soft-posterior
joint.  Test loglikelihood is estimated by importance sampling from the
encoder posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .inference import CliqueTree, build_clique_tree, posterior_batch
from .nn import MlpNetwork, decode_loglik
from .tree import LatentStructure, TreeParameters


def clustering_accuracy(pred, truth) -> float:
    """Fraction of points matched under the best cluster-to-label mapping."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.size == 0 or truth.size == 0:
        raise ValueError("empty label arrays")
    if pred.shape != truth.shape:
        raise ValueError(f"label arrays differ in length: {pred.shape} vs {truth.shape}")
    k = int(max(pred.max(), truth.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (pred, truth), 1)
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    return float(confusion[rows, cols].sum()) / pred.size


def facet_joint(post1: np.ndarray, post2: np.ndarray) -> np.ndarray:
    """Joint distribution estimate: the averaged outer product of the two
    per-datum posteriors."""
    post1 = np.atleast_2d(np.asarray(post1, dtype=float))
    post2 = np.atleast_2d(np.asarray(post2, dtype=float))
    if post1.shape[0] != post2.shape[0]:
        raise ValueError("posterior arrays differ in length")
    return post1.T @ post2 / post1.shape[0]


def facet_nmi(post1: np.ndarray, post2: np.ndarray) -> float:
    """Normalized mutual information I / sqrt(H1 H2) between two soft
    clusterings; degenerate 0/0 cases return 0."""
    joint = facet_joint(post1, post2)
    m1 = joint.sum(axis=1)
    m2 = joint.sum(axis=0)

    nz = joint > 0
    outer = np.outer(m1, m2)
    info = float(np.sum(joint[nz] * (np.log(joint[nz]) - np.log(outer[nz]))))
    info = max(info, 0.0)

    def entropy(m):
        p = m[m > 0]
        return float(-(p * np.log(p)).sum())

    denom = np.sqrt(entropy(m1) * entropy(m2))
    if denom <= 0.0 or info <= 0.0:
        return 0.0
    return min(info / denom, 1.0)


def one_hot(labels, k=None) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if k is None:
        k = int(labels.max()) + 1
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class FacetAssignment:
    """Per-latent soft posteriors and the matching hard labels."""

    soft: dict[str, np.ndarray]  # id -> (N, card)
    hard: dict[str, np.ndarray]  # id -> (N,)


def facet_assignments(
    structure: LatentStructure, params: TreeParameters, Z: np.ndarray, ct: CliqueTree | None = None
) -> FacetAssignment:
    if ct is None:
        ct = build_clique_tree(structure)
    post = posterior_batch(ct, params, Z)
    soft = dict(post.node_marginals)
    hard = {lid: np.argmax(m, axis=1) for lid, m in soft.items()}
    return FacetAssignment(soft, hard)


def importance_loglik_per_datum(
    encoder: MlpNetwork,
    decoder: MlpNetwork,
    structure: LatentStructure,
    params: TreeParameters,
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    head: str = "gaussian",
    chunk: int = 256,
) -> np.ndarray:
    """log (1/k) sum_i p(x, z_i) / q(z_i | x) over k posterior samples, per
    datum, stabilized by max subtraction inside the log-sum."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ct = build_clique_tree(structure)
    out, _ = encoder.forward(x)
    j = out.shape[1] // 2
    mu, log_sigma = out[:, :j], out[:, j:]
    sigma = np.exp(log_sigma)

    log_w = np.empty((k, x.shape[0]))
    done = 0
    while done < k:
        m = min(chunk, k - done)
        eps = rng.standard_normal(size=(m, *mu.shape))
        z = mu[None] + sigma[None] * eps
        flat = z.reshape(-1, j)
        x_rep = np.broadcast_to(x, (m, *x.shape)).reshape(-1, x.shape[1])
        log_px_z = decode_loglik(decoder, flat, x_rep, head)
        log_pz = posterior_batch(ct, params, flat).loglik
        log_q = (-0.5 * np.log(2 * np.pi) - log_sigma[None] - 0.5 * eps**2).sum(axis=2)
        log_w[done : done + m] = (
            log_px_z.reshape(m, -1) + log_pz.reshape(m, -1) - log_q
        )
        done += m
    return logsumexp(log_w, axis=0) - np.log(k)


def importance_loglik(encoder, decoder, structure, params, x, k, rng, head="gaussian") -> float:
    """Mean importance-sampled test loglikelihood over the batch."""
    return float(
        importance_loglik_per_datum(encoder, decoder, structure, params, x, k, rng, head).mean()
    )


@dataclass
class FacetReport:
    facet_ids: list[str]
    cluster_counts: dict[str, np.ndarray]
    accuracy: dict[str, dict[str, float]]  # facet id -> truth name -> ACC
    best_accuracy: dict[str, float]  # truth name -> max over facets
    nmi: np.ndarray  # (F, F)
    joints: dict[tuple[str, str], np.ndarray]


def facet_report(
    structure: LatentStructure,
    params: TreeParameters,
    Z: np.ndarray,
    truth: dict[str, np.ndarray] | None = None,
) -> FacetReport:
    """Cluster occupancy, per-facet accuracy against each ground-truth
    labeling, the facet NMI matrix, and pairwise joint tables."""
    assign = facet_assignments(structure, params, Z)
    facets = sorted(assign.soft)

    counts = {
        lid: np.bincount(assign.hard[lid], minlength=structure.card(lid)) for lid in facets
    }

    accuracy: dict[str, dict[str, float]] = {}
    best: dict[str, float] = {}
    if truth:
        for lid in facets:
            accuracy[lid] = {
                name: clustering_accuracy(assign.hard[lid], labels)
                for name, labels in truth.items()
            }
        for name in truth:
            best[name] = max(accuracy[lid][name] for lid in facets)

    f = len(facets)
    nmi = np.eye(f)
    joints = {}
    for i in range(f):
        for j in range(i + 1, f):
            a, b = facets[i], facets[j]
            nmi[i, j] = nmi[j, i] = facet_nmi(assign.soft[a], assign.soft[b])
            joints[(a, b)] = facet_joint(assign.soft[a], assign.soft[b])

    return FacetReport(facets, counts, accuracy, best, nmi, joints)


def render_facet_report(report: FacetReport) -> str:
    """TSV blocks: one per facet, then the NMI matrix, then joint tables."""
    lines = []
    for lid in report.facet_ids:
        lines.append(f"facet\t{lid}")
        counts = report.cluster_counts[lid]
        lines.append("cluster_sizes\t" + "\t".join(str(int(c)) for c in counts))
        if report.accuracy:
            for name, acc in sorted(report.accuracy[lid].items()):
                lines.append(f"acc_vs_{name}\t{acc:.6f}")
        lines.append("")
    if report.best_accuracy:
        for name, acc in sorted(report.best_accuracy.items()):
            lines.append(f"best_facet_acc_vs_{name}\t{acc:.6f}")
        lines.append("")
    lines.append("nmi_matrix\t" + "\t".join(report.facet_ids))
    for i, lid in enumerate(report.facet_ids):
        lines.append(lid + "\t" + "\t".join(f"{v:.6f}" for v in report.nmi[i]))
    lines.append("")
    for (a, b), joint in sorted(report.joints.items()):
        lines.append(f"joint\t{a}\t{b}")
        for row in joint:
            lines.append("\t".join(f"{v:.8f}" for v in row))
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"

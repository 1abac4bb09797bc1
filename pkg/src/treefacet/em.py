"""Parameter learning: batch EM and the stepwise (online) variant.

The stepwise variant keeps a dataset-scale accumulator of expected
sufficient statistics and blends each mini-batch in with a learning
rate, then re-solves the M-step from the accumulator.  Batch EM is the
special case where the accumulator is rebuilt from the whole dataset
every iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inference import BatchPosterior, CliqueTree, build_clique_tree, posterior_batch
from .tree import VARIANCE_FLOOR, LatentStructure, TreeParameters

ZERO_WEIGHT = 1e-9


@dataclass(frozen=True)
class SufficientStats:
    """Expected-count and moment accumulators mirroring TreeParameters.

    root_counts: (root_card,) expected root occupancies.
    edge_counts: non-root latent id -> (parent_card, card) expected co-occupancies.
    weights:     pouch id -> (K,) posterior mass per component.
    first:       pouch id -> (K, dim) posterior-weighted sums of z_b.
    second:      pouch id -> (K, dim) posterior-weighted sums of z_b**2.
    n_effective: number of data cases the accumulator represents.
    """

    root_counts: np.ndarray
    edge_counts: dict[str, np.ndarray]
    weights: dict[str, np.ndarray]
    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    n_effective: float

    def combine(self, other: "SufficientStats", w_self: float, w_other: float) -> "SufficientStats":
        """Elementwise w_self * self + w_other * other."""
        mix = lambda a, b: w_self * a + w_other * b
        return SufficientStats(
            mix(self.root_counts, other.root_counts),
            {k: mix(v, other.edge_counts[k]) for k, v in self.edge_counts.items()},
            {k: mix(v, other.weights[k]) for k, v in self.weights.items()},
            {k: mix(v, other.first[k]) for k, v in self.first.items()},
            {k: mix(v, other.second[k]) for k, v in self.second.items()},
            w_self * self.n_effective + w_other * other.n_effective,
        )


def stats_from_posterior(
    structure: LatentStructure, Z: np.ndarray, posterior: BatchPosterior
) -> SufficientStats:
    """Sum expected statistics over the batch behind `posterior`."""
    Z = np.asarray(Z, dtype=float)
    root_counts = posterior.node_marginals[structure.root].sum(axis=0)
    edge_counts = {cid: m.sum(axis=0) for cid, m in posterior.edge_marginals.items()}
    weights, first, second = {}, {}, {}
    for pid, p in structure.pouches.items():
        resp = posterior.node_marginals[p.parent]  # (N, K)
        zb = Z[:, list(p.vars)]
        weights[pid] = resp.sum(axis=0)
        first[pid] = resp.T @ zb
        second[pid] = resp.T @ (zb**2)
    return SufficientStats(root_counts, edge_counts, weights, first, second, float(Z.shape[0]))


def expected_stats_batch(
    structure: LatentStructure,
    params: TreeParameters,
    Z: np.ndarray,
    ct: CliqueTree | None = None,
) -> SufficientStats:
    if ct is None:
        ct = build_clique_tree(structure)
    post = posterior_batch(ct, params, np.asarray(Z, dtype=float))
    return stats_from_posterior(structure, Z, post)


def expected_stats(structure: LatentStructure, params: TreeParameters, z: np.ndarray) -> SufficientStats:
    """Expected sufficient statistics for a single data case (n_effective = 1)."""
    return expected_stats_batch(structure, params, np.asarray(z, dtype=float)[None, :])


def mstep(
    stats: SufficientStats,
    structure: LatentStructure,
    data: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    fallback: TreeParameters | None = None,
    repair_log: list | None = None,
) -> TreeParameters:
    """Closed-form maximizer given the accumulated statistics.

    Components that received (numerically) zero posterior mass cannot be
    re-estimated; they are re-seeded from a random data row (and the data
    variance) when `data` is given, or copied from `fallback` otherwise.
    Repairs are appended to `repair_log` rather than raised.
    """

    def note(msg):
        if repair_log is not None:
            repair_log.append(msg)

    prior = stats.root_counts / stats.root_counts.sum()

    cpts = {}
    for cid, counts in stats.edge_counts.items():
        rowsum = counts.sum(axis=1, keepdims=True)
        cpt = np.empty_like(counts)
        ok = rowsum[:, 0] > ZERO_WEIGHT
        cpt[ok] = counts[ok] / rowsum[ok]
        if not ok.all():
            cpt[~ok] = 1.0 / counts.shape[1]
            note(f"cpt {cid}: uniform rows for empty parent states {np.flatnonzero(~ok).tolist()}")
        cpts[cid] = cpt

    means, variances = {}, {}
    for pid, p in structure.pouches.items():
        w = stats.weights[pid]
        mean = np.empty_like(stats.first[pid])
        var = np.empty_like(stats.second[pid])
        ok = w > ZERO_WEIGHT
        mean[ok] = stats.first[pid][ok] / w[ok, None]
        var[ok] = np.maximum(stats.second[pid][ok] / w[ok, None] - mean[ok] ** 2, VARIANCE_FLOOR)
        for k in np.flatnonzero(~ok):
            if data is not None:
                local_rng = rng if rng is not None else np.random.default_rng(0)
                row = data[int(local_rng.integers(data.shape[0]))]
                mean[k] = row[list(p.vars)]
                var[k] = np.maximum(data[:, list(p.vars)].var(axis=0), VARIANCE_FLOOR)
                note(f"pouch {pid}: re-seeded empty component {k} from data")
            elif fallback is not None:
                mean[k] = fallback.means[pid][k]
                var[k] = fallback.variances[pid][k]
                note(f"pouch {pid}: kept previous parameters for empty component {k}")
            else:
                raise ValueError(
                    f"pouch {pid} component {k} has zero weight and no data/fallback to re-seed from"
                )
        means[pid] = mean
        variances[pid] = var

    return TreeParameters(prior, cpts, means, variances)


def batch_em(
    structure: LatentStructure,
    params0: TreeParameters,
    data: np.ndarray,
    max_iters: int = 200,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    ct: CliqueTree | None = None,
    repair_log: list | None = None,
) -> tuple[TreeParameters, list[float]]:
    """Alternate E and M over the full dataset until the total loglikelihood
    improves by less than `tol` or `max_iters` M-steps have run.

    Returns the final parameters and the loglikelihood trace; trace[-1] is
    evaluated at the returned parameters.
    """
    data = np.asarray(data, dtype=float)
    if ct is None:
        ct = build_clique_tree(structure)
    params = params0
    post = posterior_batch(ct, params, data)
    trace = [float(post.loglik.sum())]
    for _ in range(max_iters):
        stats = stats_from_posterior(structure, data, post)
        params = mstep(stats, structure, data=data, rng=rng, repair_log=repair_log)
        post = posterior_batch(ct, params, data)
        trace.append(float(post.loglik.sum()))
        if trace[-1] - trace[-2] < tol:
            break
    return params, trace


def stepwise_update(
    accumulator: SufficientStats,
    batch_stats: SufficientStats,
    rate: float,
    n_total: int,
    structure: LatentStructure,
    fallback: TreeParameters | None = None,
    repair_log: list | None = None,
) -> tuple[SufficientStats, TreeParameters]:
    """One online EM step: blend the dataset-scale accumulator toward the
    batch statistics rescaled to n_total cases, then re-solve the M-step.

    rate(eta)=1 replaces the accumulator outright; rate=0 leaves it alone.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    scale = n_total / batch_stats.n_effective
    accumulator = accumulator.combine(batch_stats, 1.0 - rate, rate * scale)
    params = mstep(accumulator, structure, fallback=fallback, repair_log=repair_log)
    return accumulator, params

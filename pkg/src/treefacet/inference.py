"""Exact inference on the latent tree by message passing.

All evidence lives on the pouches (the observed code z); queries return
the marginal loglikelihood plus node and pairwise posteriors over the
discrete latents.  Messages are kept normalized with the magnitude in a
separate log-scale accumulator, so deep trees and large J do not
underflow.  The public entry points take one code vector; everything is
implemented on a batched core so EM and training can amortize over N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tree import LatentStructure, TreeParameters, check_model


@dataclass(frozen=True)
class CliqueTree:
    """Scaffold for collect/distribute passes, reusable across queries.

    One clique per model edge (latent-parent and pouch-parent); separators
    are single latent variables.  `collect_edges` lists directed latent
    edges leaf-to-pivot; the distribute pass replays them reversed.
    Per-query message storage is owned by the caller, so one scaffold can
    serve concurrent queries.
    """

    structure: LatentStructure
    pivot: str
    collect_edges: tuple[tuple[str, str], ...]
    neighbors: dict[str, tuple[str, ...]]

    @property
    def cliques(self) -> tuple[tuple[str, str, str], ...]:
        """(kind, node, parent-latent) for every model edge."""
        out = [
            ("latent", n.id, n.parent)
            for n in self.structure.latent_nodes
            if n.parent is not None
        ]
        out += [("pouch", p.id, p.parent) for p in self.structure.pouch_nodes]
        return tuple(out)

    @property
    def n_cliques(self) -> int:
        return len(self.cliques)


@dataclass(frozen=True)
class Posterior:
    """Posterior for one code vector: P(y|z), P(y, y_parent|z), log p(z)."""

    node_marginals: dict[str, np.ndarray]
    edge_marginals: dict[str, np.ndarray]
    loglik: float


@dataclass(frozen=True)
class BatchPosterior:
    """Same as Posterior but with a leading batch axis on every field."""

    node_marginals: dict[str, np.ndarray]  # id -> (N, card)
    edge_marginals: dict[str, np.ndarray]  # child id -> (N, parent_card, card)
    loglik: np.ndarray  # (N,)

    def __getitem__(self, i: int) -> Posterior:
        return Posterior(
            {k: v[i] for k, v in self.node_marginals.items()},
            {k: v[i] for k, v in self.edge_marginals.items()},
            float(self.loglik[i]),
        )


def build_clique_tree(structure: LatentStructure, pivot: str | None = None) -> CliqueTree:
    """Scaffold with collect order toward `pivot` (default: the root latent)."""
    check_model(structure)
    if pivot is None:
        pivot = structure.root
    if pivot not in structure.latents:
        raise ValueError(f"pivot {pivot} is not a latent node")

    neighbors: dict[str, list[str]] = {n.id: [] for n in structure.latent_nodes}
    for n in structure.latent_nodes:
        if n.parent is not None:
            neighbors[n.id].append(n.parent)
            neighbors[n.parent].append(n.id)
    for lst in neighbors.values():
        lst.sort()

    # Orient every latent edge toward the pivot; edges are emitted deepest
    # first so each message's inputs are ready when it is computed.
    order: list[str] = [pivot]
    parent_toward_pivot: dict[str, str] = {}
    i = 0
    while i < len(order):
        node = order[i]
        for nb in neighbors[node]:
            if nb != parent_toward_pivot.get(node):
                parent_toward_pivot[nb] = node
                order.append(nb)
        i += 1
    collect = tuple((node, parent_toward_pivot[node]) for node in reversed(order[1:]))

    return CliqueTree(
        structure=structure,
        pivot=pivot,
        collect_edges=collect,
        neighbors={k: tuple(v) for k, v in neighbors.items()},
    )


def gaussian_logpdf(z: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """log N(z | mean, diag(var)) for z (N, d) against components (K, d) -> (N, K)."""
    const = np.log(2.0 * np.pi * var).sum(axis=1)  # (K,)
    quad = ((z[:, None, :] - mean[None, :, :]) ** 2 / var[None, :, :]).sum(axis=2)
    return -0.5 * (const[None, :] + quad)


def _log_local_evidence(ct: CliqueTree, params: TreeParameters, Z: np.ndarray) -> dict[str, np.ndarray]:
    """Per latent: summed pouch-child log densities plus the root log prior."""
    s = ct.structure
    n = Z.shape[0]
    out = {}
    with np.errstate(divide="ignore"):
        log_prior = np.log(params.root_prior)
    for lid in s.latents:
        acc = np.zeros((n, s.card(lid)))
        for pid in s.pouch_children[lid]:
            p = s.pouches[pid]
            acc += gaussian_logpdf(Z[:, list(p.vars)], params.means[pid], params.variances[pid])
        if lid == s.root:
            acc += log_prior[None, :]
        out[lid] = acc
    return out


def _log_edge_factor(ct: CliqueTree, params: TreeParameters, a: str, b: str) -> tuple[np.ndarray, bool]:
    """Log CPT on the undirected edge {a, b}; flag is True when `a` is the child."""
    s = ct.structure
    if s.latents[a].parent == b:
        cpt = params.cpts[a]  # (card_b, card_a)
        return _safe_log(cpt), True
    cpt = params.cpts[b]  # (card_a, card_b)
    return _safe_log(cpt), False


def _safe_log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


def _pass_messages(ct: CliqueTree, params: TreeParameters, Z: np.ndarray):
    """Collect and distribute; returns (local evidence, directed log-messages).

    messages[(a, b)] is the normalized log-message from a to b, shape
    (N, card_b), plus its (N,) log-scale.
    """
    logphi = _log_local_evidence(ct, params, Z)
    messages: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = {}

    def send(a: str, b: str) -> None:
        s_a = logphi[a].copy()
        for nb in ct.neighbors[a]:
            if nb == b:
                continue
            msg, scale = messages[(nb, a)]
            s_a += msg + scale[:, None]
        log_f, a_is_child = _log_edge_factor(ct, params, a, b)
        if a_is_child:
            # factor (card_b, card_a): marginalize the a axis
            raw = logsumexp(s_a[:, None, :] + log_f[None, :, :], axis=2)
        else:
            raw = logsumexp(s_a[:, :, None] + log_f[None, :, :], axis=1)
        scale = logsumexp(raw, axis=1)
        messages[(a, b)] = (raw - scale[:, None], scale)

    for a, b in ct.collect_edges:
        send(a, b)
    for b, a in reversed(ct.collect_edges):
        send(a, b)
    return logphi, messages


def _belief(ct: CliqueTree, logphi, messages, node: str, exclude: str | None = None) -> np.ndarray:
    b = logphi[node].copy()
    for nb in ct.neighbors[node]:
        if nb == exclude:
            continue
        msg, scale = messages[(nb, node)]
        b += msg + scale[:, None]
    return b


def posterior_batch(ct: CliqueTree, params: TreeParameters, Z: np.ndarray) -> BatchPosterior:
    """Exact posteriors and loglikelihood for each row of Z (N, J)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != ct.structure.n_vars:
        raise ValueError(f"evidence must be (N, {ct.structure.n_vars}), got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("evidence contains non-finite values")

    s = ct.structure
    logphi, messages = _pass_messages(ct, params, Z)

    loglik = logsumexp(_belief(ct, logphi, messages, ct.pivot), axis=1)

    node_marginals = {}
    for lid in s.latents:
        b = _belief(ct, logphi, messages, lid)
        node_marginals[lid] = np.exp(b - logsumexp(b, axis=1)[:, None])

    edge_marginals = {}
    for n in s.latent_nodes:
        if n.parent is None:
            continue
        half_child = _belief(ct, logphi, messages, n.id, exclude=n.parent)
        half_parent = _belief(ct, logphi, messages, n.parent, exclude=n.id)
        log_b = (
            _safe_log(params.cpts[n.id])[None, :, :]
            + half_parent[:, :, None]
            + half_child[:, None, :]
        )
        norm = logsumexp(log_b, axis=(1, 2))
        edge_marginals[n.id] = np.exp(log_b - norm[:, None, None])

    return BatchPosterior(node_marginals, edge_marginals, loglik)


def marginal_loglik(ct: CliqueTree, params: TreeParameters, z: np.ndarray) -> Posterior:
    """Loglikelihood and posteriors for a single code vector z (J,)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 1:
        raise ValueError(f"expected a single code vector, got shape {z.shape}")
    return posterior_batch(ct, params, z[None, :])[0]


def grad_z_batch(
    ct: CliqueTree, params: TreeParameters, Z: np.ndarray, posterior: BatchPosterior
) -> np.ndarray:
    """d log p(z) / dz for each row of Z: the posterior-weighted pull of each
    pouch toward its component means, concatenated over pouches."""
    s = ct.structure
    Z = np.asarray(Z, dtype=float)
    grad = np.zeros_like(Z)
    for pid in sorted(s.pouches):
        p = s.pouches[pid]
        w = posterior.node_marginals[p.parent]  # (N, K)
        pull = (params.means[pid][None, :, :] - Z[:, None, list(p.vars)]) / params.variances[pid][None, :, :]
        grad[:, list(p.vars)] = np.einsum("nk,nkd->nd", w, pull)
    return grad


def grad_z(ct: CliqueTree, params: TreeParameters, z: np.ndarray, posterior: Posterior) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    batch = BatchPosterior(
        {k: v[None] for k, v in posterior.node_marginals.items()},
        {k: v[None] for k, v in posterior.edge_marginals.items()},
        np.asarray([posterior.loglik]),
    )
    return grad_z_batch(ct, params, z[None, :], batch)[0]


def collect_messages(ct: CliqueTree, params: TreeParameters, Z: np.ndarray):
    """Normalized message vectors with their log-scales, for inspection/tests."""
    Z = np.asarray(Z, dtype=float)
    _, messages = _pass_messages(ct, params, Z)
    return {edge: (np.exp(m), scale) for edge, (m, scale) in messages.items()}

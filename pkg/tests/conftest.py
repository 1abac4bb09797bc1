"""Shared fixtures: hand-built structures and a random model generator."""

import numpy as np
import pytest

from treefacet.tree import (
    LatentNode,
    LatentStructure,
    PouchNode,
    TreeParameters,
    VARIANCE_FLOOR,
)


def single_latent_model(card=1, dim=1, mean=0.0, var=1.0, prior=None):
    """One latent over one pouch covering all dims, with constant Gaussians."""
    structure = LatentStructure(
        [LatentNode("Y0", card, None)], [PouchNode("P0", tuple(range(dim)), "Y0")]
    )
    if prior is None:
        prior = np.full(card, 1.0 / card)
    means = np.broadcast_to(np.asarray(mean, dtype=float), (card, dim)).copy()
    variances = np.broadcast_to(np.asarray(var, dtype=float), (card, dim)).copy()
    params = TreeParameters(np.asarray(prior, dtype=float), {}, {"P0": means}, {"P0": variances})
    return structure, params


def random_structure(rng, max_latents=4, max_card=3, max_vars=6):
    """Random valid tree with random pouch partition of 1..max_vars dims."""
    n_latents = int(rng.integers(1, max_latents + 1))
    latents = []
    for i in range(n_latents):
        parent = None if i == 0 else f"Y{int(rng.integers(0, i))}"
        latents.append(LatentNode(f"Y{i}", int(rng.integers(2, max_card + 1)), parent))

    n_vars = int(rng.integers(1, max_vars + 1))
    cuts = sorted(rng.choice(np.arange(1, n_vars), size=min(n_vars - 1, int(rng.integers(0, n_vars))), replace=False).tolist()) if n_vars > 1 else []
    groups = np.split(np.arange(n_vars), cuts)
    pouches = [
        PouchNode(f"P{k}", tuple(int(v) for v in grp), f"Y{int(rng.integers(0, n_latents))}")
        for k, grp in enumerate(groups)
    ]
    return LatentStructure(latents, pouches)


def random_params(structure, rng, mean_scale=2.0):
    prior = rng.dirichlet(np.ones(structure.card(structure.root)))
    cpts = {
        n.id: rng.dirichlet(np.ones(n.card), size=structure.card(n.parent))
        for n in structure.latent_nodes
        if n.parent is not None
    }
    means, variances = {}, {}
    for pid, p in structure.pouches.items():
        card = structure.card(p.parent)
        means[pid] = rng.normal(scale=mean_scale, size=(card, len(p.vars)))
        variances[pid] = np.maximum(rng.uniform(0.2, 2.0, size=(card, len(p.vars))), VARIANCE_FLOOR)
    return TreeParameters(prior, cpts, means, variances)


def random_model(rng, **kwargs):
    structure = random_structure(rng, **kwargs)
    return structure, random_params(structure, rng)


def brute_force_posterior(structure, params, z):
    """Enumerate every joint latent assignment of Eq.-style sum directly.

    Independent oracle for the message-passing code: returns
    (loglik, node marginals, edge marginals keyed by child id).
    """
    from itertools import product

    z = np.asarray(z, dtype=float)
    order = structure.topo_order()
    cards = [structure.card(lid) for lid in order]
    idx = {lid: i for i, lid in enumerate(order)}

    log_terms = []
    assignments = list(product(*[range(c) for c in cards]))
    for assign in assignments:
        lp = np.log(params.root_prior[assign[idx[structure.root]]])
        for n in structure.latent_nodes:
            if n.parent is not None:
                lp += np.log(params.cpts[n.id][assign[idx[n.parent]], assign[idx[n.id]]])
        for pid, p in structure.pouches.items():
            y = assign[idx[p.parent]]
            mu = params.means[pid][y]
            var = params.variances[pid][y]
            zb = z[list(p.vars)]
            lp += float(-0.5 * np.sum(np.log(2 * np.pi * var) + (zb - mu) ** 2 / var))
        log_terms.append(lp)

    log_terms = np.asarray(log_terms)
    m = log_terms.max()
    loglik = m + np.log(np.exp(log_terms - m).sum())
    weights = np.exp(log_terms - loglik)

    node_marg = {lid: np.zeros(structure.card(lid)) for lid in order}
    edge_marg = {
        n.id: np.zeros((structure.card(n.parent), n.card))
        for n in structure.latent_nodes
        if n.parent is not None
    }
    for w, assign in zip(weights, assignments):
        for lid in order:
            node_marg[lid][assign[idx[lid]]] += w
        for n in structure.latent_nodes:
            if n.parent is not None:
                edge_marg[n.id][assign[idx[n.parent]], assign[idx[n.id]]] += w
    return loglik, node_marg, edge_marg


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)

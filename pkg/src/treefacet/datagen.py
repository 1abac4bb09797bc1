"""Synthetic benchmark data and sampling from trained models.

The benchmark draws a 4-d code from two independent two-cluster facets
(dims 0-1 and 2-3), then lifts it to 100-d observations through two
random sigmoid layers.  Sampling utilities cover ancestral draws from
the tree, draws from a fixed mixture component, and conditional
regeneration that holds chosen facets fixed while resampling others.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .inference import build_clique_tree, posterior_batch
from .nn import MlpNetwork
from .tree import LatentStructure, TreeParameters, check_model


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; the defaults define the acceptance benchmark."""

    n_samples: int = 5000
    z_dim: int = 4
    facet_means: tuple = (((-3.0, -3.0), (3.0, 3.0)), ((-3.0, -3.0), (3.0, 3.0)))
    facet_variance: float = 0.25
    hidden_dim: int = 10
    x_dim: int = 100
    seed: int = 0


class SyntheticData(NamedTuple):
    x: np.ndarray
    z_true: np.ndarray
    labels1: np.ndarray
    labels2: np.ndarray


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticData:
    """Two-facet clustered code pushed through x = sigmoid(U sigmoid(W z))."""
    rng = np.random.default_rng(spec.seed)
    w = rng.standard_normal(size=(spec.hidden_dim, spec.z_dim))
    u = rng.standard_normal(size=(spec.x_dim, spec.hidden_dim))

    n = spec.n_samples
    means1 = np.asarray(spec.facet_means[0], dtype=float)
    means2 = np.asarray(spec.facet_means[1], dtype=float)
    labels1 = rng.integers(0, means1.shape[0], size=n)
    labels2 = rng.integers(0, means2.shape[0], size=n)
    sd = np.sqrt(spec.facet_variance)
    z = np.empty((n, spec.z_dim))
    z[:, :2] = means1[labels1] + sd * rng.standard_normal(size=(n, 2))
    z[:, 2:] = means2[labels2] + sd * rng.standard_normal(size=(n, 2))

    x = expit(expit(z @ w.T) @ u.T)
    return SyntheticData(x, z, labels1, labels2)


def _decode(decoder: MlpNetwork | None, z: np.ndarray, head: str):
    """Map codes to observation space; the bernoulli head emits probabilities."""
    if decoder is None:
        return None
    out = decoder(z)
    return expit(out) if head == "bernoulli" else out


def _sample_states(probs: np.ndarray, rng) -> np.ndarray:
    """Vectorized categorical draw per row of a (N, K) probability matrix."""
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(size=(probs.shape[0], 1))
    return (u > cdf[:, :-1]).sum(axis=1) if probs.shape[1] > 1 else np.zeros(probs.shape[0], dtype=int)


def _sample_pouches(structure, params, assignments, rng) -> np.ndarray:
    n = next(iter(assignments.values())).shape[0]
    z = np.empty((n, structure.n_vars))
    for pid in sorted(structure.pouches):
        p = structure.pouches[pid]
        states = assignments[p.parent]
        mu = params.means[pid][states]
        sd = np.sqrt(params.variances[pid][states])
        z[:, list(p.vars)] = mu + sd * rng.standard_normal(size=mu.shape)
    return z


def ancestral_sample(
    structure: LatentStructure,
    params: TreeParameters,
    n: int,
    rng: np.random.Generator,
    decoder: MlpNetwork | None = None,
    head: str = "gaussian",
):
    """Draw n codes root-to-leaves: root from its prior, each latent from its
    parent's row in the CPT, each pouch from its conditional Gaussian.

    Returns (z, x, assignments); x is None without a decoder.
    """
    check_model(structure, params)
    assignments: dict[str, np.ndarray] = {}
    for lid in structure.topo_order():
        parent = structure.latents[lid].parent
        if parent is None:
            probs = np.tile(params.root_prior, (n, 1))
        else:
            probs = params.cpts[lid][assignments[parent]]
        assignments[lid] = _sample_states(probs, rng)
    z = _sample_pouches(structure, params, assignments, rng)
    return z, _decode(decoder, z, head), assignments


def component_sample(
    structure: LatentStructure,
    params: TreeParameters,
    assignment: dict[str, int],
    n: int,
    rng: np.random.Generator,
    decoder: MlpNetwork | None = None,
    head: str = "gaussian",
):
    """Draw n codes from one fixed mixture component (a full latent assignment)."""
    check_model(structure, params)
    full = {}
    for lid in structure.latents:
        if lid not in assignment:
            raise ValueError(f"assignment is missing latent {lid}")
        state = int(assignment[lid])
        if not 0 <= state < structure.card(lid):
            raise ValueError(f"state {state} out of range for latent {lid}")
        full[lid] = np.full(n, state, dtype=int)
    z = _sample_pouches(structure, params, full, rng)
    return z, _decode(decoder, z, head)


def sample_latents_given(
    structure: LatentStructure,
    params: TreeParameters,
    clamped: dict[str, np.ndarray],
    n: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Joint draw of the unclamped latents from the tree conditional on the
    clamped ones, via one upward pass and top-down sampling.

    `clamped` maps latent ids to (n,) state arrays; returns all latents.
    """
    order = structure.topo_order()
    with np.errstate(divide="ignore"):
        log_prior = np.log(params.root_prior)
        log_cpts = {k: np.log(v) for k, v in params.cpts.items()}

    def log_indicator(lid):
        phi = np.zeros((n, structure.card(lid)))
        if lid in clamped:
            phi[:] = -np.inf
            phi[np.arange(n), clamped[lid]] = 0.0
        return phi

    # upward: message from each latent to its parent, children first
    up: dict[str, np.ndarray] = {}
    for lid in reversed(order):
        score = log_indicator(lid)
        for child in structure.latent_children[lid]:
            score = score + up[child]
        if lid != structure.root:
            msg = logsumexp(score[:, None, :] + log_cpts[lid][None, :, :], axis=2)
            up[lid] = msg - logsumexp(msg, axis=1)[:, None]
        else:
            up[lid] = score  # root keeps its combined score

    out: dict[str, np.ndarray] = {}
    for lid in order:
        parent = structure.latents[lid].parent
        if parent is None:
            logits = log_prior[None, :] + up[lid]
        else:
            logits = log_cpts[lid][out[parent]] + log_indicator(lid)
            for child in structure.latent_children[lid]:
                logits = logits + up[child]
        probs = np.exp(logits - logsumexp(logits, axis=1)[:, None])
        out[lid] = _sample_states(probs, rng)
    return out


def conditional_generate(
    structure: LatentStructure,
    params: TreeParameters,
    encoder: MlpNetwork,
    x_input: np.ndarray,
    resample_facets,
    rng: np.random.Generator,
    fixed_facet: str | None = None,
    decoder: MlpNetwork | None = None,
    head: str = "gaussian",
):
    """Regenerate inputs while holding facets fixed at their inferred states.

    Each input is encoded to its posterior mean; all latents outside
    `resample_facets` are clamped at their per-datum MAP state (ties go to
    the lowest state), the resampled facets are drawn from the tree
    conditional, and a fresh code is drawn per pouch.
    """
    resample = set(resample_facets)
    for lid in resample | ({fixed_facet} if fixed_facet is not None else set()):
        if lid not in structure.latents:
            raise ValueError(f"unknown facet {lid}")
    if fixed_facet is not None and fixed_facet in resample:
        raise ValueError(f"facet {fixed_facet} is both fixed and resampled")

    x_input = np.atleast_2d(np.asarray(x_input, dtype=float))
    out, _ = encoder.forward(x_input)
    j = out.shape[1] // 2
    mu = out[:, :j]

    ct = build_clique_tree(structure)
    post = posterior_batch(ct, params, mu)
    clamped = {
        lid: np.argmax(post.node_marginals[lid], axis=1)
        for lid in structure.latents
        if lid not in resample
    }
    assignments = sample_latents_given(structure, params, clamped, x_input.shape[0], rng)
    z = _sample_pouches(structure, params, assignments, rng)
    return z, _decode(decoder, z, head), assignments

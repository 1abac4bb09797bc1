"""Hill-climbing structure search over latent trees, scored by BIC.

Seven moves modify the tree: introduce/delete a latent node (NI/ND),
add/remove a state (SI/SD), relocate a node (NR), and merge/split
pouches (PO/UP).  The search runs three phases per pass - expand
(NI/SI/PO), adjust (NR), simplify (UP/ND/SD) - each hill-climbed to a
local optimum, and repeats passes until a whole pass yields no BIC gain.
Candidates are screened with cheap EM runs; only the phase winner gets
the full-budget fit before acceptance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .em import batch_em
from .inference import build_clique_tree, posterior_batch
from .tree import (
    LatentNode,
    LatentStructure,
    PouchNode,
    TreeParameters,
    check_model,
    count_parameters,
    init_random,
)

OPERATORS = ("NI", "SI", "PO", "NR", "UP", "ND", "SD")
_OP_RANK = {op: i for i, op in enumerate(("NI", "SI", "PO", "NR", "UP", "ND", "SD"))}

MAX_CARD = 20


@dataclass(frozen=True)
class Proposal:
    """An unparameterized candidate structure plus how it was produced."""

    structure: LatentStructure
    op: str
    targets: tuple[str, ...]


@dataclass
class Candidate:
    structure: LatentStructure
    params: TreeParameters
    bic: float
    loglik: float
    op: str
    targets: tuple[str, ...]

    @property
    def provenance(self) -> str:
        return f"{self.op}({','.join(self.targets)})"


@dataclass
class SearchConfig:
    screen_restarts: int = 4
    screen_iters: int = 50
    final_restarts: int = 10
    final_iters: int = 200
    em_tol: float = 1e-4
    max_phase_steps: int = 50
    max_passes: int = 10
    max_card: int = MAX_CARD
    max_latents: int | None = None  # None: capped at the code dimension J
    seed: int = 0


def _fresh_id(prefix: str, structure: LatentStructure) -> str:
    used = set(structure.latents) | set(structure.pouches)
    k = len(used)
    while f"{prefix}{k}" in used:
        k += 1
    return f"{prefix}{k}"


def _rebuild(structure, latents, pouches):
    return LatentStructure(latents, pouches)


def _children_ids(structure, lid):
    return sorted(structure.latent_children[lid] + structure.pouch_children[lid])


def node_introduction(structure, target, max_latents=None):
    """New card-2 latent below `target`, adopting one pair of its children."""
    if target not in structure.latents:
        return []
    if max_latents is not None and len(structure.latent_nodes) >= max_latents:
        return []
    kids = _children_ids(structure, target)
    out = []
    for a, b in itertools.combinations(kids, 2):
        new_id = _fresh_id("Y", structure)
        latents = [LatentNode(n.id, n.card, n.parent) for n in structure.latent_nodes]
        pouches = [PouchNode(p.id, p.vars, p.parent) for p in structure.pouch_nodes]
        latents.append(LatentNode(new_id, 2, target))
        latents = [
            LatentNode(n.id, n.card, new_id) if n.id in (a, b) else n for n in latents
        ]
        pouches = [
            PouchNode(p.id, p.vars, new_id) if p.id in (a, b) else p for p in pouches
        ]
        out.append(Proposal(_rebuild(structure, latents, pouches), "NI", (target, a, b)))
    return out


def node_deletion(structure, target):
    """Remove a non-root latent; its children reattach to its parent."""
    node = structure.latents.get(target)
    if node is None or node.parent is None:
        return []
    latents = [
        LatentNode(n.id, n.card, node.parent if n.parent == target else n.parent)
        for n in structure.latent_nodes
        if n.id != target
    ]
    pouches = [
        PouchNode(p.id, p.vars, node.parent if p.parent == target else p.parent)
        for p in structure.pouch_nodes
    ]
    return [Proposal(_rebuild(structure, latents, pouches), "ND", (target,))]


def state_introduction(structure, target, max_card=MAX_CARD):
    node = structure.latents.get(target)
    if node is None or node.card >= max_card:
        return []
    latents = [
        LatentNode(n.id, n.card + 1 if n.id == target else n.card, n.parent)
        for n in structure.latent_nodes
    ]
    return [Proposal(_rebuild(structure, latents, structure.pouch_nodes), "SI", (target,))]


def state_deletion(structure, target):
    node = structure.latents.get(target)
    if node is None or node.card <= 2:
        return []
    latents = [
        LatentNode(n.id, n.card - 1 if n.id == target else n.card, n.parent)
        for n in structure.latent_nodes
    ]
    return [Proposal(_rebuild(structure, latents, structure.pouch_nodes), "SD", (target,))]


def node_relocation(structure, target):
    """Reattach `target` (latent or pouch) under every other feasible latent."""
    out = []
    if target in structure.latents:
        node = structure.latents[target]
        if node.parent is None:
            return []
        forbidden = structure.descendants(target) | {target, node.parent}
        for host in sorted(structure.latents):
            if host in forbidden:
                continue
            latents = [
                LatentNode(n.id, n.card, host if n.id == target else n.parent)
                for n in structure.latent_nodes
            ]
            out.append(
                Proposal(_rebuild(structure, latents, structure.pouch_nodes), "NR", (target, host))
            )
    elif target in structure.pouches:
        pouch = structure.pouches[target]
        for host in sorted(structure.latents):
            if host == pouch.parent:
                continue
            pouches = [
                PouchNode(p.id, p.vars, host if p.id == target else p.parent)
                for p in structure.pouch_nodes
            ]
            out.append(
                Proposal(_rebuild(structure, structure.latent_nodes, pouches), "NR", (target, host))
            )
    return out


def pouching(structure, target):
    """Merge the two sibling pouches named in `target` into one pouch."""
    a, b = target
    pa, pb = structure.pouches.get(a), structure.pouches.get(b)
    if pa is None or pb is None or pa.parent != pb.parent or a == b:
        return []
    new_id = _fresh_id("P", structure)
    merged = PouchNode(new_id, tuple(sorted(pa.vars + pb.vars)), pa.parent)
    pouches = [p for p in structure.pouch_nodes if p.id not in (a, b)] + [merged]
    return [Proposal(_rebuild(structure, structure.latent_nodes, pouches), "PO", (a, b))]


def unpouching(structure, target):
    """Split variable `target[1]` out of pouch `target[0]` into a new sibling."""
    pid, var = target
    pouch = structure.pouches.get(pid)
    if pouch is None or len(pouch.vars) < 2 or int(var) not in pouch.vars:
        return []
    var = int(var)
    new_id = _fresh_id("P", structure)
    remaining = PouchNode(pid, tuple(v for v in pouch.vars if v != var), pouch.parent)
    single = PouchNode(new_id, (var,), pouch.parent)
    pouches = [remaining if p.id == pid else p for p in structure.pouch_nodes] + [single]
    return [Proposal(_rebuild(structure, structure.latent_nodes, pouches), "UP", (pid, str(var)))]


def apply_operator(op, structure, target, max_card=MAX_CARD, max_latents=None):
    """Candidate structures for one operator at one target; empty if inapplicable."""
    if op == "NI":
        return node_introduction(structure, target, max_latents=max_latents)
    if op == "ND":
        return node_deletion(structure, target)
    if op == "SI":
        return state_introduction(structure, target, max_card=max_card)
    if op == "SD":
        return state_deletion(structure, target)
    if op == "NR":
        return node_relocation(structure, target)
    if op == "PO":
        return pouching(structure, target)
    if op == "UP":
        return unpouching(structure, target)
    raise ValueError(f"unknown operator {op!r}")


def enumerate_proposals(op, structure, max_card=MAX_CARD, max_latents=None):
    """All applications of `op` anywhere in the structure, in a fixed order."""
    out = []
    if op in ("NI", "SI", "SD", "ND"):
        for lid in sorted(structure.latents):
            out.extend(apply_operator(op, structure, lid, max_card, max_latents))
    elif op == "NR":
        for nid in sorted(structure.latents):
            out.extend(node_relocation(structure, nid))
        for nid in sorted(structure.pouches):
            out.extend(node_relocation(structure, nid))
    elif op == "PO":
        for lid in sorted(structure.latents):
            for a, b in itertools.combinations(sorted(structure.pouch_children[lid]), 2):
                out.extend(pouching(structure, (a, b)))
    elif op == "UP":
        for pid in sorted(structure.pouches):
            for var in structure.pouches[pid].vars:
                out.extend(unpouching(structure, (pid, var)))
    else:
        raise ValueError(f"unknown operator {op!r}")
    return out


def bic_score(structure, params, data, num_params=None, ct=None):
    """Total data loglikelihood minus the d/2 log N complexity penalty."""
    data = np.asarray(data, dtype=float)
    if ct is None:
        ct = build_clique_tree(structure)
    loglik = float(posterior_batch(ct, params, data).loglik.sum())
    d = count_parameters(structure) if num_params is None else num_params
    return float(loglik - 0.5 * d * np.log(data.shape[0]))


def inherit_params(new_structure, old_structure, old_params, data, rng):
    """Copy parameters wherever node identity and shape carry over; draw the
    rest fresh (Dirichlet rows; data-row means; column-variance spreads)."""
    data = np.asarray(data, dtype=float)

    def fresh_rows(card_parent, card):
        return rng.dirichlet(np.ones(card), size=card_parent)

    root = new_structure.root
    root_card = new_structure.card(root)
    if root in old_structure.latents and old_structure.latents[root].parent is None and old_structure.card(root) == root_card:
        prior = old_params.root_prior.copy()
    else:
        prior = rng.dirichlet(np.ones(root_card))

    cpts = {}
    for node in new_structure.topo_order():
        parent = new_structure.latents[node].parent
        if parent is None:
            continue
        shape = (new_structure.card(parent), new_structure.card(node))
        old = old_structure.latents.get(node)
        if (
            old is not None
            and old.parent is not None
            and node in old_params.cpts
            and old_params.cpts[node].shape == shape
        ):
            cpts[node] = old_params.cpts[node].copy()
        else:
            cpts[node] = fresh_rows(*shape)

    means, variances = {}, {}
    for pid in sorted(new_structure.pouches):
        p = new_structure.pouches[pid]
        card = new_structure.card(p.parent)
        old = old_structure.pouches.get(pid)
        if (
            old is not None
            and old.vars == p.vars
            and pid in old_params.means
            and old_params.means[pid].shape == (card, len(p.vars))
        ):
            means[pid] = old_params.means[pid].copy()
            variances[pid] = old_params.variances[pid].copy()
        else:
            cols = data[:, list(p.vars)]
            rows = rng.choice(data.shape[0], size=card, replace=False)
            means[pid] = cols[rows]
            variances[pid] = np.tile(np.maximum(cols.var(axis=0), 1e-4), (card, 1))

    return TreeParameters(prior, cpts, means, variances)


def evaluate_candidate(
    proposal: Proposal,
    old_structure: LatentStructure,
    old_params: TreeParameters,
    data: np.ndarray,
    restarts: int,
    em_iters: int,
    seed,
    em_tol: float = 1e-4,
) -> Candidate:
    """Fit a proposal with inherited parameters plus random restarts and keep
    the best run by final loglikelihood.  Deterministic in `seed`."""
    structure = proposal.structure
    check_model(structure)
    data = np.asarray(data, dtype=float)
    ct = build_clique_tree(structure)
    rng = np.random.default_rng(seed)

    starts = [inherit_params(structure, old_structure, old_params, data, rng)]
    for _ in range(max(0, restarts - 1)):
        starts.append(init_random(structure, data, rng))

    best_params, best_ll = None, -np.inf
    for p0 in starts:
        fitted, trace = batch_em(structure, p0, data, max_iters=em_iters, tol=em_tol, rng=rng, ct=ct)
        if trace[-1] > best_ll:
            best_params, best_ll = fitted, trace[-1]

    penalty = 0.5 * count_parameters(structure) * np.log(data.shape[0])
    return Candidate(
        structure, best_params, float(best_ll - penalty), float(best_ll), proposal.op, proposal.targets
    )


def _tie_break_key(c: Candidate):
    return (-c.bic, count_parameters(c.structure), _OP_RANK[c.op], c.targets)


PHASES = (("NI", "SI", "PO"), ("NR",), ("UP", "ND", "SD"))


def search(
    structure0: LatentStructure,
    params0: TreeParameters,
    data: np.ndarray,
    config: SearchConfig | None = None,
) -> tuple[LatentStructure, TreeParameters, list[str]]:
    """Greedy three-phase hill climb from (structure0, params0).

    Returns the best model found and a log with one line per accepted step:
    ``step=<k> op=<name> target=<ids> bic_before=<v> bic_after=<v>``.
    """
    if config is None:
        config = SearchConfig()
    data = np.asarray(data, dtype=float)
    max_latents = config.max_latents if config.max_latents is not None else data.shape[1]

    cur_s, cur_p = structure0, params0
    cur_bic = bic_score(cur_s, cur_p, data)
    log: list[str] = []
    step = 0
    eval_counter = itertools.count()

    def run_eval(proposal, restarts, iters):
        return evaluate_candidate(
            proposal, cur_s, cur_p, data, restarts, iters,
            seed=[config.seed, next(eval_counter)], em_tol=config.em_tol,
        )

    for _ in range(config.max_passes):
        bic_at_pass_start = cur_bic
        for phase_ops in PHASES:
            for _ in range(config.max_phase_steps):
                proposals = []
                for op in phase_ops:
                    proposals.extend(
                        enumerate_proposals(op, cur_s, max_card=config.max_card, max_latents=max_latents)
                    )
                if not proposals:
                    break
                screened = [run_eval(p, config.screen_restarts, config.screen_iters) for p in proposals]
                winner = min(screened, key=_tie_break_key)
                if winner.bic <= cur_bic:
                    break
                final = run_eval(
                    Proposal(winner.structure, winner.op, winner.targets),
                    config.final_restarts,
                    config.final_iters,
                )
                if final.bic <= cur_bic:
                    break
                step += 1
                log.append(
                    f"step={step} op={final.op} target={','.join(final.targets)} "
                    f"bic_before={cur_bic!r} bic_after={final.bic!r}"
                )
                cur_s, cur_p, cur_bic = final.structure, final.params, final.bic
        if cur_bic <= bic_at_pass_start:
            break

    return cur_s, cur_p, log

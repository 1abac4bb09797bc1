"""Tree-structured mixture model over latent codes.

A model is a rooted tree of discrete latent nodes.  Observed code
dimensions are grouped into "pouches"; each pouch hangs off one latent
node and, conditional on that node's state, follows a diagonal Gaussian.
A single latent node over one pouch is an ordinary Gaussian mixture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

VARIANCE_FLOOR = 1e-4
MODEL_FORMAT_VERSION = 1

PROB_TOL = 1e-12


class ModelFormatError(ValueError):
    """Raised when a serialized model cannot be parsed."""


@dataclass(frozen=True)
class LatentNode:
    id: str
    card: int
    parent: str | None  # None marks the root


@dataclass(frozen=True)
class PouchNode:
    id: str
    vars: tuple[int, ...]
    parent: str


class LatentStructure:
    """Immutable tree layout: latent nodes plus their pouch leaves.

    Derived lookups (children lists, root, topological order) are built
    once at construction; instances are safe to share across threads.
    """

    def __init__(self, latent_nodes, pouch_nodes):
        self.latent_nodes = tuple(
            LatentNode(str(n.id), int(n.card), None if n.parent is None else str(n.parent))
            for n in latent_nodes
        )
        self.pouch_nodes = tuple(
            PouchNode(str(p.id), tuple(int(v) for v in p.vars), str(p.parent))
            for p in pouch_nodes
        )
        self.latents = {n.id: n for n in self.latent_nodes}
        self.pouches = {p.id: p for p in self.pouch_nodes}

        roots = [n.id for n in self.latent_nodes if n.parent is None]
        self._root = roots[0] if len(roots) == 1 else None

        self.latent_children = {n.id: [] for n in self.latent_nodes}
        self.pouch_children = {n.id: [] for n in self.latent_nodes}
        for n in self.latent_nodes:
            if n.parent is not None and n.parent in self.latent_children:
                self.latent_children[n.parent].append(n.id)
        for p in self.pouch_nodes:
            if p.parent in self.pouch_children:
                self.pouch_children[p.parent].append(p.id)
        for lst in self.latent_children.values():
            lst.sort()
        for lst in self.pouch_children.values():
            lst.sort()

    @property
    def root(self) -> str:
        if self._root is None:
            raise ValueError("structure has no unique root")
        return self._root

    @property
    def n_vars(self) -> int:
        return sum(len(p.vars) for p in self.pouch_nodes)

    def card(self, latent_id: str) -> int:
        return self.latents[latent_id].card

    def topo_order(self) -> list[str]:
        """Latent ids root-first; children follow their parent."""
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(self.latent_children[order[i]])
            i += 1
        return order

    def descendants(self, latent_id: str) -> set[str]:
        """Latent ids strictly below `latent_id`."""
        out: set[str] = set()
        stack = list(self.latent_children[latent_id])
        while stack:
            node = stack.pop()
            out.add(node)
            stack.extend(self.latent_children[node])
        return out

    @classmethod
    def flat(cls, card: int, n_vars: int) -> "LatentStructure":
        """One latent over one singleton pouch per code dimension."""
        latents = [LatentNode("Y0", card, None)]
        pouches = [PouchNode(f"P{j}", (j,), "Y0") for j in range(n_vars)]
        return cls(latents, pouches)

    def __eq__(self, other):
        return (
            isinstance(other, LatentStructure)
            and self.latent_nodes == other.latent_nodes
            and self.pouch_nodes == other.pouch_nodes
        )

    def __hash__(self):
        return hash((self.latent_nodes, self.pouch_nodes))

    def __repr__(self):
        return (
            f"LatentStructure({len(self.latent_nodes)} latents, "
            f"{len(self.pouch_nodes)} pouches, {self.n_vars} vars)"
        )


@dataclass(frozen=True)
class TreeParameters:
    """Numeric parameters laid out against a LatentStructure.

    root_prior: (root_card,) probability vector.
    cpts:       non-root latent id -> (parent_card, card) row-stochastic matrix.
    means:      pouch id -> (parent_card, pouch_dim) component means.
    variances:  pouch id -> (parent_card, pouch_dim) diagonal variances.
    """

    root_prior: np.ndarray
    cpts: dict[str, np.ndarray]
    means: dict[str, np.ndarray]
    variances: dict[str, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "root_prior", np.asarray(self.root_prior, dtype=float))
        object.__setattr__(self, "cpts", {k: np.asarray(v, dtype=float) for k, v in self.cpts.items()})
        object.__setattr__(self, "means", {k: np.asarray(v, dtype=float) for k, v in self.means.items()})
        object.__setattr__(
            self, "variances", {k: np.asarray(v, dtype=float) for k, v in self.variances.items()}
        )


def canonical_signature(structure: LatentStructure):
    """Id-free canonical form of a structure, for isomorphism checks.

    Two structures are isomorphic (equal up to node relabeling) exactly
    when their signatures compare equal.  Pouch variable sets are part of
    the signature; node ids are not.
    """

    def latent_sig(lid):
        pouch_sigs = sorted(
            tuple(sorted(structure.pouches[p].vars)) for p in structure.pouch_children[lid]
        )
        child_sigs = sorted(latent_sig(c) for c in structure.latent_children[lid])
        return (structure.card(lid), tuple(pouch_sigs), tuple(child_sigs))

    return latent_sig(structure.root)


def validate(structure: LatentStructure, params: TreeParameters | None = None) -> str | None:
    """Return the first violated invariant as a message, or None when valid."""
    roots = [n.id for n in structure.latent_nodes if n.parent is None]
    if len(roots) == 0:
        return "no root latent node"
    if len(roots) > 1:
        return f"multiple roots: {', '.join(sorted(roots))}"
    if not structure.latent_nodes:
        return "no latent nodes"

    seen = set()
    for n in structure.latent_nodes:
        if n.id in seen:
            return f"duplicate latent id {n.id}"
        seen.add(n.id)
        if n.card < 1:
            return f"latent {n.id} has cardinality {n.card} < 1"
        if n.parent is not None and n.parent not in structure.latents:
            return f"latent {n.id} has unknown parent {n.parent}"

    # Walking up from every latent must reach the root without revisiting a
    # node; with unique parents this implies the links form a tree.
    root = roots[0]
    for n in structure.latent_nodes:
        visited = set()
        cur = n.id
        while cur is not None:
            if cur in visited:
                return f"latent parent links contain a cycle through {n.id}"
            visited.add(cur)
            cur = structure.latents[cur].parent
        if root not in visited:
            return f"latent {n.id} is disconnected from the root"

    for p in structure.pouch_nodes:
        if p.id in seen:
            return f"duplicate node id {p.id}"
        seen.add(p.id)
        if p.parent not in structure.latents:
            return f"pouch {p.id} has non-latent parent {p.parent}"
        if len(p.vars) == 0:
            return f"pouch {p.id} has no variables"

    covered: dict[int, str] = {}
    for p in structure.pouch_nodes:
        for v in p.vars:
            if v in covered:
                return f"variable {v} appears in pouches {covered[v]} and {p.id}"
            covered[v] = p.id
    n_vars = len(covered)
    if covered and set(covered) != set(range(n_vars)):
        missing = sorted(set(range(max(covered) + 1)) - set(covered))
        return f"pouch variables do not cover 0..J-1 (missing {missing})"

    for n in structure.latent_nodes:
        if (
            n.parent is None
            and not structure.latent_children[n.id]
            and not structure.pouch_children[n.id]
            and (len(structure.latent_nodes) > 1 or structure.pouch_nodes)
        ):
            return f"latent {n.id} has no neighbors"

    if params is None:
        return None

    prior = params.root_prior
    root_card = structure.card(root)
    if prior.shape != (root_card,):
        return f"root prior shape {prior.shape} does not match root cardinality {root_card}"
    if np.any(prior < 0):
        return "root prior has negative entries"
    if abs(prior.sum() - 1.0) > PROB_TOL:
        return f"root prior sums to {prior.sum()!r}, not 1"

    for n in structure.latent_nodes:
        if n.parent is None:
            continue
        cpt = params.cpts.get(n.id)
        if cpt is None:
            return f"missing CPT for latent {n.id}"
        expect = (structure.card(n.parent), n.card)
        if cpt.shape != expect:
            return f"CPT for {n.id} has shape {cpt.shape}, expected {expect}"
        if np.any(cpt < 0):
            return f"CPT for {n.id} has negative entries"
        rowsums = cpt.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > PROB_TOL):
            return f"CPT row for latent {n.id} sums to {rowsums[np.argmax(np.abs(rowsums - 1.0))]!r}"

    for p in structure.pouch_nodes:
        mean = params.means.get(p.id)
        var = params.variances.get(p.id)
        if mean is None or var is None:
            return f"missing Gaussians for pouch {p.id}"
        expect = (structure.card(p.parent), len(p.vars))
        if mean.shape != expect:
            return f"means for pouch {p.id} have shape {mean.shape}, expected {expect}"
        if var.shape != expect:
            return f"variances for pouch {p.id} have shape {var.shape}, expected {expect}"
        if not np.all(np.isfinite(mean)):
            return f"non-finite mean in pouch {p.id}"
        if np.any(var < VARIANCE_FLOOR - 1e-15):
            return f"variance below floor in pouch {p.id}"

    return None


def check_model(structure: LatentStructure, params: TreeParameters | None = None) -> None:
    problem = validate(structure, params)
    if problem is not None:
        raise ValueError(problem)


def count_parameters(structure: LatentStructure) -> int:
    """Number of free parameters: prior + CPT rows + per-component mean/variance."""
    root = structure.root
    total = structure.card(root) - 1
    for n in structure.latent_nodes:
        if n.parent is not None:
            total += structure.card(n.parent) * (n.card - 1)
    for p in structure.pouch_nodes:
        total += structure.card(p.parent) * 2 * len(p.vars)
    return total


def init_random(structure: LatentStructure, data_sample: np.ndarray, seed) -> TreeParameters:
    """Random starting point for EM, deterministic in `seed`.

    Prior and CPT rows are symmetric Dirichlet(1) draws.  Component means
    are distinct data rows restricted to each pouch's dimensions; variances
    start at the per-dimension data variance.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    data_sample = np.asarray(data_sample, dtype=float)
    n = data_sample.shape[0]
    max_card = max(structure.card(p.parent) for p in structure.pouch_nodes)
    if n < max_card:
        raise ValueError(f"need at least {max_card} data rows to initialize, got {n}")

    root = structure.root
    prior = rng.dirichlet(np.ones(structure.card(root)))
    cpts = {}
    for node in structure.topo_order():
        parent = structure.latents[node].parent
        if parent is not None:
            cpts[node] = rng.dirichlet(np.ones(structure.card(node)), size=structure.card(parent))

    means, variances = {}, {}
    for pid in sorted(structure.pouches):
        p = structure.pouches[pid]
        card = structure.card(p.parent)
        rows = rng.choice(n, size=card, replace=False)
        cols = data_sample[:, list(p.vars)]
        means[pid] = cols[rows]
        col_var = np.maximum(cols.var(axis=0), VARIANCE_FLOOR)
        variances[pid] = np.tile(col_var, (card, 1))

    return TreeParameters(prior, cpts, means, variances)


def model_to_dict(structure: LatentStructure, params: TreeParameters) -> dict:
    return {
        "version": MODEL_FORMAT_VERSION,
        "latent_nodes": [
            {"id": n.id, "card": n.card, "parent": n.parent} for n in structure.latent_nodes
        ],
        "pouch_nodes": [
            {"id": p.id, "vars": list(p.vars), "parent": p.parent} for p in structure.pouch_nodes
        ],
        "root_prior": params.root_prior.tolist(),
        "cpts": {k: v.tolist() for k, v in sorted(params.cpts.items())},
        "gaussians": {
            pid: [
                {"mean": params.means[pid][y].tolist(), "var": params.variances[pid][y].tolist()}
                for y in range(params.means[pid].shape[0])
            ]
            for pid in sorted(params.means)
        },
    }


def model_from_dict(doc: dict) -> tuple[LatentStructure, TreeParameters]:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document is not a JSON object")
    version = doc.get("version")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {version!r}")
    for key in ("latent_nodes", "pouch_nodes", "root_prior", "cpts", "gaussians"):
        if key not in doc:
            raise ModelFormatError(f"missing {key}")

    try:
        latents = [
            LatentNode(str(n["id"]), int(n["card"]), None if n["parent"] is None else str(n["parent"]))
            for n in doc["latent_nodes"]
        ]
        pouches = [
            PouchNode(str(p["id"]), tuple(int(v) for v in p["vars"]), str(p["parent"]))
            for p in doc["pouch_nodes"]
        ]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed node entry: {exc}") from exc
    structure = LatentStructure(latents, pouches)

    try:
        prior = np.asarray(doc["root_prior"], dtype=float)
        cpts = {str(k): np.asarray(v, dtype=float) for k, v in doc["cpts"].items()}
        means = {}
        variances = {}
        for pid, comps in doc["gaussians"].items():
            means[str(pid)] = np.asarray([c["mean"] for c in comps], dtype=float)
            variances[str(pid)] = np.asarray([c["var"] for c in comps], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed parameter entry: {exc}") from exc
    params = TreeParameters(prior, cpts, means, variances)

    problem = validate(structure, params)
    if problem is not None:
        raise ModelFormatError(problem)
    return structure, params


def serialize(structure: LatentStructure, params: TreeParameters) -> str:
    """Model as versioned JSON; floats round-trip exactly through repr."""
    return json.dumps(model_to_dict(structure, params), indent=1)


def deserialize(text: str) -> tuple[LatentStructure, TreeParameters]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(doc)

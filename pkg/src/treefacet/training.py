"""Training loop: autoencoder pretraining, then alternating rounds of
joint gradient/online-EM updates and structure search.

Each round runs E epochs of minibatch updates (Adam on the networks,
one online EM step on the tree per batch), re-encodes the dataset to
its posterior means, and hands those codes to the structure search.
Rounds stop at `max_rounds` or when the mean bound stops improving.
A checkpoint (model + optimizer state + history) is written per round
when an output directory is given, and training can resume from it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .em import batch_em, expected_stats_batch, stepwise_update
from .inference import build_clique_tree
from .nn import (
    AdamState,
    MlpNetwork,
    adam_step,
    decode_loglik_and_grads,
    elbo_and_gradients,
)
from .search import SearchConfig, bic_score, search
from .tree import (
    LatentStructure,
    TreeParameters,
    check_model,
    init_random,
    model_from_dict,
    model_to_dict,
)


@dataclass
class TrainConfig:
    z_dim: int = 4
    head: str = "bernoulli"
    hidden_sizes: tuple = (64, 32)
    epochs_per_round: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    stepwise_rate: float = 0.01
    mc_samples: int = 1
    pretrain_epochs: int = 30
    init_restarts: int = 10
    max_rounds: int = 20
    elbo_tol: float = 1e-3
    structure_search: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0

    def __post_init__(self):
        for name in ("z_dim", "epochs_per_round", "batch_size", "max_rounds", "mc_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0 or not 0 < self.stepwise_rate <= 1:
            raise ValueError("learning rates must be positive (stepwise rate in (0, 1])")
        if self.head not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown decoder head {self.head!r}")


@dataclass
class TrainResult:
    encoder: MlpNetwork
    decoder: MlpNetwork
    structure: LatentStructure
    params: TreeParameters
    history: dict
    enc_state: AdamState
    dec_state: AdamState


def build_networks(x_dim: int, config: TrainConfig, rng) -> tuple[MlpNetwork, MlpNetwork]:
    hidden = tuple(config.hidden_sizes)
    encoder = MlpNetwork.create((x_dim, *hidden, 2 * config.z_dim), rng)
    # start the posterior narrow so early code samples stay informative
    encoder.layers[-1].bias[config.z_dim :] = -2.0
    decoder = MlpNetwork.create((config.z_dim, *reversed(hidden), x_dim), rng)
    return encoder, decoder


def encode_means(encoder: MlpNetwork, x: np.ndarray) -> np.ndarray:
    out, _ = encoder.forward(x)
    return out[:, : out.shape[1] // 2]


def pretrain(data: np.ndarray, config: TrainConfig, rng: np.random.Generator | None = None):
    """Reconstruction-only warmup with the deterministic code, then a
    mixture fit on the resulting encodings.

    Returns (encoder, decoder, structure0, params0, info); the initial
    structure is one card-2 latent over singleton pouches, and its
    parameters are the best of `init_restarts` EM fits on the encodings.
    """
    data = np.asarray(data, dtype=float)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n = data.shape[0]
    encoder, decoder = build_networks(data.shape[1], config, rng)
    enc_state = AdamState.for_network(encoder)
    dec_state = AdamState.for_network(decoder)
    j = config.z_dim

    recon_history = []
    for _ in range(config.pretrain_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            out, cache = encoder.forward(batch)
            code = out[:, :j]
            ll, dz, dec_grads = decode_loglik_and_grads(decoder, code, batch, config.head)
            total += ll.sum()
            scale = 1.0 / batch.shape[0]
            dec_grads = [(dw * scale, db * scale) for dw, db in dec_grads]
            dout = np.concatenate([dz * scale, np.zeros_like(dz)], axis=1)
            _, enc_grads = encoder.backward(cache, dout)
            adam_step(decoder, dec_grads, dec_state, lr=config.learning_rate)
            adam_step(encoder, enc_grads, enc_state, lr=config.learning_rate)
        recon_history.append(total / n)

    structure0 = LatentStructure.flat(2, j)
    codes = encode_means(encoder, data)
    best_params, best_ll = None, -np.inf
    for _ in range(config.init_restarts):
        p0 = init_random(structure0, codes, rng)
        fitted, trace = batch_em(structure0, p0, codes, max_iters=200, tol=1e-4, rng=rng)
        if trace[-1] > best_ll:
            best_params, best_ll = fitted, trace[-1]
    check_model(structure0, best_params)

    info = {
        "recon": recon_history,
        "init_loglik": best_ll,
        "enc_state": enc_state,
        "dec_state": dec_state,
    }
    return encoder, decoder, structure0, best_params, info


def train(data: np.ndarray, config: TrainConfig, out_dir=None, resume: bool = False) -> TrainResult:
    """Full alternating loop; deterministic in (data, config).

    With `out_dir` set, a checkpoint is written after every round; with
    `resume` also set, an existing checkpoint there is picked up and the
    remaining rounds run from its saved state.
    """
    data = np.asarray(data, dtype=float)
    rng = np.random.default_rng(config.seed)

    state = load_checkpoint(out_dir) if (resume and out_dir is not None) else None
    t0 = time.perf_counter()
    if state is None:
        encoder, decoder, structure, params, pre = pretrain(data, config, rng)
        enc_state, dec_state = pre["enc_state"], pre["dec_state"]
        history = {
            "pretrain_recon": pre["recon"],
            "epochs": [],
            "rounds": [],
            "timings": {"pretrain": time.perf_counter() - t0},
        }
        start_round = 0
    else:
        encoder, decoder = state["encoder"], state["decoder"]
        structure, params = state["structure"], state["params"]
        enc_state, dec_state = state["enc_state"], state["dec_state"]
        history = state["history"]
        start_round = len(history["rounds"])
        rng.bit_generator.state = state["rng_state"]

    n = data.shape[0]
    ct = build_clique_tree(structure)
    codes = encode_means(encoder, data)
    accumulator = expected_stats_batch(structure, params, codes, ct=ct)

    prev_round_elbo = history["rounds"][-1]["mean_elbo"] if history["rounds"] else None
    result = TrainResult(encoder, decoder, structure, params, history, enc_state, dec_state)

    for round_idx in range(start_round, config.max_rounds):
        t_sgd = time.perf_counter()
        epoch_means = []
        for _ in range(config.epochs_per_round):
            order = rng.permutation(n)
            sums = np.zeros(3)
            for start in range(0, n, config.batch_size):
                batch = data[order[start : start + config.batch_size]]
                breakdown, enc_grads, dec_grads, enc = elbo_and_gradients(
                    encoder, decoder, ct, params, batch,
                    head=config.head, n_samples=config.mc_samples, rng=rng,
                )
                adam_step(encoder, enc_grads, enc_state, lr=config.learning_rate)
                adam_step(decoder, dec_grads, dec_state, lr=config.learning_rate)

                batch_stats = expected_stats_batch(structure, params, enc.z[0], ct=ct)
                accumulator, params = stepwise_update(
                    accumulator, batch_stats, config.stepwise_rate, n, structure, fallback=params
                )
                w = batch.shape[0] / n
                sums += w * np.array([breakdown.recon, breakdown.prior, breakdown.entropy])
            epoch_means.append(
                {
                    "recon": float(sums[0]),
                    "prior": float(sums[1]),
                    "entropy": float(sums[2]),
                    "total": float(sums.sum()),
                }
            )
        history["epochs"].extend(epoch_means)
        sgd_seconds = time.perf_counter() - t_sgd

        t_search = time.perf_counter()
        codes = encode_means(encoder, data)
        bic_before = bic_score(structure, params, codes, ct=ct)
        search_log: list[str] = []
        if config.structure_search:
            search_cfg = SearchConfig(
                **{**config.search.__dict__, "seed": config.search.seed + 1000 * (round_idx + 1)}
            )
            structure, params, search_log = search(structure, params, codes, search_cfg)
            ct = build_clique_tree(structure)
        bic_after = bic_score(structure, params, codes, ct=ct)
        accumulator = expected_stats_batch(structure, params, codes, ct=ct)
        search_seconds = time.perf_counter() - t_search

        round_elbo = float(np.mean([e["total"] for e in epoch_means]))
        history["rounds"].append(
            {
                "round": round_idx,
                "mean_elbo": round_elbo,
                "bic_before_search": bic_before,
                "bic_after_search": bic_after,
                "accepted_steps": len(search_log),
                "search_log": search_log,
                "sgd_seconds": sgd_seconds,
                "search_seconds": search_seconds,
                "round_seconds": sgd_seconds + search_seconds,
            }
        )

        result = TrainResult(encoder, decoder, structure, params, history, enc_state, dec_state)
        if out_dir is not None:
            save_checkpoint(out_dir, result, config, rng)

        if prev_round_elbo is not None and round_elbo - prev_round_elbo < config.elbo_tol:
            break
        prev_round_elbo = round_elbo

    history["timings"]["total"] = history["timings"].get("total", 0.0) + (time.perf_counter() - t0)
    if out_dir is not None:
        save_checkpoint(out_dir, result, config, rng)
    return result


def checkpoint_to_dict(result: TrainResult, config: TrainConfig) -> dict:
    doc = model_to_dict(result.structure, result.params)
    doc["encoder"] = result.encoder.to_dict()
    doc["decoder"] = result.decoder.to_dict()
    doc["head"] = config.head
    return doc


def save_checkpoint(out_dir, result: TrainResult, config: TrainConfig, rng=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.json").write_text(json.dumps(checkpoint_to_dict(result, config), indent=1))
    optimizer = {
        "encoder": result.enc_state.to_dict(),
        "decoder": result.dec_state.to_dict(),
    }
    if rng is not None:
        optimizer["rng_state"] = rng.bit_generator.state
    (out / "optimizer.json").write_text(json.dumps(optimizer))
    (out / "history.json").write_text(json.dumps(result.history, indent=1))


def load_checkpoint(out_dir):
    """Reconstruct the training state saved by `save_checkpoint`, or None."""
    out = Path(out_dir) if out_dir is not None else None
    if out is None or not (out / "model.json").exists() or not (out / "optimizer.json").exists():
        return None
    structure, params, encoder, decoder, _head = load_model(out / "model.json")
    optimizer = json.loads((out / "optimizer.json").read_text())
    history = json.loads((out / "history.json").read_text())
    return {
        "structure": structure,
        "params": params,
        "encoder": encoder,
        "decoder": decoder,
        "enc_state": AdamState.from_dict(optimizer["encoder"]),
        "dec_state": AdamState.from_dict(optimizer["decoder"]),
        "rng_state": optimizer.get("rng_state"),
        "history": history,
    }


def load_model(path):
    """Read a model file back: (structure, params, encoder, decoder, head).

    Files without network weights load with encoder/decoder set to None.
    """
    doc = json.loads(Path(path).read_text())
    structure, params = model_from_dict(doc)
    encoder = MlpNetwork.from_dict(doc["encoder"]) if "encoder" in doc else None
    decoder = MlpNetwork.from_dict(doc["decoder"]) if "decoder" in doc else None
    return structure, params, encoder, decoder, doc.get("head", "gaussian")

"""Small from-scratch MLP stack: encoder/decoder networks, the bound
objective that couples them to the tree prior, and Adam.

The encoder maps a data batch to (mu, log sigma) of a diagonal Gaussian
over the J-dimensional code; samples are reparameterized as
z = mu + exp(log_sigma) * eps with the eps draws retained so backward
passes and gradient checks replay the exact same randomness.  The
objective is reconstruction + tree-prior loglikelihood + posterior
entropy, averaged over the batch; all gradients point uphill (ascent).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import CliqueTree, grad_z_batch, posterior_batch
from .tree import TreeParameters

LOGIT_CLAMP = 15.0


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str  # relu | sigmoid | identity


class MlpNetwork:
    """Plain fully-connected stack with manual forward/backward."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weights.shape[1] != nxt.weights.shape[0]:
                raise ValueError("consecutive layer shapes do not compose")

    @classmethod
    def create(cls, sizes, rng, hidden_activation="relu", output_activation="identity"):
        """Seeded init: weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), zero bias."""
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(
                Layer(rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out), act)
            )
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].weights.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].weights.shape[1]

    def forward(self, x: np.ndarray):
        """Returns (output, cache) with per-layer inputs and pre-activations."""
        cache = []
        h = np.asarray(x, dtype=float)
        for layer in self.layers:
            pre = h @ layer.weights + layer.bias
            cache.append((h, pre))
            h = _activate(pre, layer.activation)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout: np.ndarray):
        """Backprop dout (d objective / d output) through the stack.

        Returns (dx, grads) where grads[i] = (dweights, dbias) for layer i.
        """
        grads = [None] * len(self.layers)
        d = dout
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            h, pre = cache[i]
            d = d * _activate_grad(pre, layer.activation)
            grads[i] = (h.T @ d, d.sum(axis=0))
            d = d @ layer.weights.T
        return d, grads

    def zero_grads(self):
        return [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in self.layers]

    def copy(self):
        return MlpNetwork(
            [Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def to_dict(self):
        return {
            "layers": [
                {"weights": l.weights.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            [
                Layer(np.asarray(l["weights"], dtype=float), np.asarray(l["bias"], dtype=float), l["activation"])
                for l in doc["layers"]
            ]
        )


def _activate(pre, kind):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-pre))
    if kind == "identity":
        return pre
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(pre, kind):
    if kind == "relu":
        return (pre > 0).astype(float)
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-pre))
        return s * (1.0 - s)
    if kind == "identity":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class EncodedBatch:
    """Encoder output plus the retained noise draws behind each sample."""

    mu: np.ndarray  # (N, J)
    log_sigma: np.ndarray  # (N, J)
    z: np.ndarray  # (M, N, J)
    eps: np.ndarray  # (M, N, J)
    cache: list = field(repr=False, default=None)


@dataclass(frozen=True)
class ElboBreakdown:
    recon: float
    prior: float
    entropy: float

    @property
    def total(self) -> float:
        return self.recon + self.prior + self.entropy


def encode(
    encoder: MlpNetwork,
    x: np.ndarray,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> EncodedBatch:
    """Run the encoder and draw reparameterized code samples.

    The encoder's output layer carries 2J units: columns [:J] are mu and
    [J:] are log sigma.  Pass `eps` to replay fixed noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("encoder input contains non-finite values")
    out, cache = encoder.forward(x)
    j = out.shape[1] // 2
    mu, log_sigma = out[:, :j], out[:, j:]
    if eps is None:
        if rng is None:
            raise ValueError("need rng or fixed eps to sample")
        eps = rng.standard_normal(size=(n_samples, *mu.shape))
    else:
        eps = np.asarray(eps, dtype=float)
        if eps.ndim == 2:
            eps = eps[None]
    z = mu[None] + np.exp(log_sigma)[None] * eps
    return EncodedBatch(mu, log_sigma, z, eps, cache)


def entropy_term(log_sigma: np.ndarray) -> np.ndarray:
    """Differential entropy of the diagonal-Gaussian posterior, per datum."""
    log_sigma = np.atleast_2d(np.asarray(log_sigma, dtype=float))
    j = log_sigma.shape[1]
    return 0.5 * j * np.log(2 * np.pi) + 0.5 * (1.0 + 2.0 * log_sigma).sum(axis=1)


def decode_loglik(decoder: MlpNetwork, z: np.ndarray, x: np.ndarray, head: str) -> np.ndarray:
    """log p(x | z) per datum under the chosen observation head."""
    ll, _, _ = _decode_forward(decoder, z, x, head)
    return ll


def _decode_forward(decoder, z, x, head):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, cache = decoder.forward(z)
    if head == "bernoulli":
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("bernoulli head requires x in [0, 1]")
        logits = np.clip(out, -LOGIT_CLAMP, LOGIT_CLAMP)
        ll = (x * logits - np.logaddexp(0.0, logits)).sum(axis=1)
        dout = (x - _activate(logits, "sigmoid")) * (np.abs(out) < LOGIT_CLAMP)
    elif head == "gaussian":
        d = x.shape[1]
        ll = -0.5 * d * np.log(2 * np.pi) - 0.5 * ((x - out) ** 2).sum(axis=1)
        dout = x - out
    else:
        raise ValueError(f"unknown decoder head {head!r}")
    return ll, dout, cache


def decode_loglik_and_grads(decoder, z, x, head):
    """(per-datum loglik, d loglik / dz, decoder parameter grads of the sum)."""
    ll, dout, cache = _decode_forward(decoder, z, x, head)
    dz, grads = decoder.backward(cache, dout)
    return ll, dz, grads


def elbo_and_gradients(
    encoder: MlpNetwork,
    decoder: MlpNetwork,
    ct: CliqueTree,
    params: TreeParameters,
    x: np.ndarray,
    head: str = "gaussian",
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
):
    """Monte-Carlo bound and its exact gradients for one batch.

    Returns (breakdown, encoder grads, decoder grads, encoded batch).
    Scalars in the breakdown are batch means; gradients are of the batch
    mean (ascent direction).  The prior term's pull on z comes from the
    tree model's own gradient; entropy contributes +1 to every log-sigma
    coordinate.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    enc = encode(encoder, x, n_samples=n_samples, rng=rng, eps=eps)
    m = enc.z.shape[0]
    sigma = np.exp(enc.log_sigma)

    dec_grads = None
    dmu = np.zeros_like(enc.mu)
    dlogsig = np.zeros_like(enc.log_sigma)
    recon_sum = 0.0
    prior_sum = 0.0
    for i in range(m):
        z_i = enc.z[i]
        ll, dz_recon, grads_i = decode_loglik_and_grads(decoder, z_i, x, head)
        recon_sum += ll.sum()
        post = posterior_batch(ct, params, z_i)
        prior_sum += post.loglik.sum()
        dz = (dz_recon + grad_z_batch(ct, params, z_i, post)) / (m * n)
        dmu += dz
        dlogsig += dz * enc.eps[i] * sigma
        if dec_grads is None:
            dec_grads = [(dw / (m * n), db / (m * n)) for dw, db in grads_i]
        else:
            dec_grads = [
                (acc_w + dw / (m * n), acc_b + db / (m * n))
                for (acc_w, acc_b), (dw, db) in zip(dec_grads, grads_i)
            ]

    entropy = entropy_term(enc.log_sigma)
    dlogsig += 1.0 / n  # d entropy / d log_sigma = 1 per coordinate

    _, enc_grads = encoder.backward(enc.cache, np.concatenate([dmu, dlogsig], axis=1))

    breakdown = ElboBreakdown(
        recon=recon_sum / (m * n), prior=prior_sum / (m * n), entropy=float(entropy.mean())
    )
    return breakdown, enc_grads, dec_grads, enc


@dataclass
class AdamState:
    """First/second moment buffers per layer, one step counter."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_network(cls, net: MlpNetwork):
        return cls(
            m=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers],
            v=[(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in net.layers],
        )

    def to_dict(self):
        return {
            "t": self.t,
            "m": [[mw.tolist(), mb.tolist()] for mw, mb in self.m],
            "v": [[vw.tolist(), vb.tolist()] for vw, vb in self.v],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            m=[(np.asarray(mw), np.asarray(mb)) for mw, mb in doc["m"]],
            v=[(np.asarray(vw), np.asarray(vb)) for vw, vb in doc["v"]],
            t=int(doc["t"]),
        )


def adam_step(
    net: MlpNetwork,
    grads,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam ascent step: parameters move along the given gradients
    (which are gradients of the objective being maximized)."""
    state.t += 1
    correct1 = 1.0 - beta1**state.t
    correct2 = 1.0 - beta2**state.t
    for layer, (gw, gb), mom, sec in zip(net.layers, grads, state.m, state.v):
        for param, g, m_buf, v_buf in ((layer.weights, gw, mom[0], sec[0]), (layer.bias, gb, mom[1], sec[1])):
            m_buf *= beta1
            m_buf += (1 - beta1) * g
            v_buf *= beta2
            v_buf += (1 - beta2) * g**2
            param += lr * (m_buf / correct1) / (np.sqrt(v_buf / correct2) + eps)

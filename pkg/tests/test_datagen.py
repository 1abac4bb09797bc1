import numpy as np
import pytest
from sklearn.mixture import GaussianMixture

from treefacet.datagen import (
    SyntheticSpec,
    ancestral_sample,
    component_sample,
    conditional_generate,
    generate_synthetic,
    sample_latents_given,
)
from treefacet.inference import build_clique_tree, posterior_batch
from treefacet.metrics import clustering_accuracy
from treefacet.nn import Layer, MlpNetwork
from treefacet.tree import LatentNode, LatentStructure, PouchNode, TreeParameters

from conftest import single_latent_model


def two_facet_model():
    """Native-code model matching the synthetic generator's facet layout."""
    latents = [LatentNode("Y0", 2, None), LatentNode("Y1", 2, "Y0")]
    pouches = [PouchNode("P0", (0, 1), "Y0"), PouchNode("P1", (2, 3), "Y1")]
    structure = LatentStructure(latents, pouches)
    params = TreeParameters(
        np.array([0.5, 0.5]),
        {"Y1": np.array([[0.5, 0.5], [0.5, 0.5]])},
        {"P0": np.array([[-3.0, -3.0], [3.0, 3.0]]), "P1": np.array([[-3.0, -3.0], [3.0, 3.0]])},
        {"P0": np.full((2, 2), 0.25), "P1": np.full((2, 2), 0.25)},
    )
    return structure, params


def identity_codec(j=4):
    """Encoder/decoder that pass the code through unchanged (x space == z space)."""
    enc_w = np.concatenate([np.eye(j), np.zeros((j, j))], axis=1)
    encoder = MlpNetwork([Layer(enc_w, np.zeros(2 * j), "identity")])
    decoder = MlpNetwork([Layer(np.eye(j), np.zeros(j), "identity")])
    return encoder, decoder


class TestGenerateSynthetic:
    def test_outputs_in_sigmoid_range(self):
        data = generate_synthetic(SyntheticSpec(n_samples=200, seed=1))
        assert data.x.shape == (200, 100)
        assert np.all((data.x > 0) & (data.x < 1))

    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(n_samples=100, seed=5))
        b = generate_synthetic(SyntheticSpec(n_samples=100, seed=5))
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.labels1, b.labels1)
        assert np.array_equal(a.labels2, b.labels2)

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticSpec(n_samples=100, seed=5))
        b = generate_synthetic(SyntheticSpec(n_samples=100, seed=6))
        assert not np.array_equal(a.x, b.x)

    def test_facet_clusters_separable(self):
        data = generate_synthetic(SyntheticSpec(n_samples=1000, seed=2))
        gmm = GaussianMixture(2, random_state=0).fit(data.z_true[:, :2])
        pred = gmm.predict(data.z_true[:, :2])
        assert clustering_accuracy(pred, data.labels1) >= 0.99


class TestAncestralSample:
    def test_root_frequencies_match_prior(self):
        structure, params = single_latent_model(
            card=3, dim=1, mean=[[-1.0], [0.0], [1.0]], var=1.0, prior=[0.2, 0.3, 0.5]
        )
        n = 100_000
        _, _, assign = ancestral_sample(structure, params, n, np.random.default_rng(0))
        freq = np.bincount(assign["Y0"], minlength=3) / n
        sd = np.sqrt(np.array([0.2, 0.3, 0.5]) * (1 - np.array([0.2, 0.3, 0.5])) / n)
        assert np.all(np.abs(freq - [0.2, 0.3, 0.5]) < 3 * sd)

    def test_card_one_chain_deterministic_path(self):
        structure, params = single_latent_model(card=1, dim=2, mean=[[5.0, -5.0]], var=0.01)
        z, _, assign = ancestral_sample(structure, params, 50, np.random.default_rng(1))
        assert np.all(assign["Y0"] == 0)
        assert np.all(np.abs(z - [5.0, -5.0]) < 1.0)

    def test_conditional_means(self):
        structure, params = two_facet_model()
        n = 20_000
        z, _, assign = ancestral_sample(structure, params, n, np.random.default_rng(3))
        for state in (0, 1):
            rows = assign["Y0"] == state
            mu = params.means["P0"][state]
            emp = z[rows][:, :2].mean(axis=0)
            tol = 3 * np.sqrt(0.25 / rows.sum())
            assert np.all(np.abs(emp - mu) < tol)

    def test_decoder_output_attached(self):
        structure, params = two_facet_model()
        _, decoder = identity_codec()
        z, x, _ = ancestral_sample(
            structure, params, 10, np.random.default_rng(0), decoder=decoder, head="gaussian"
        )
        assert np.array_equal(x, z)

    def test_self_consistent_loglik(self):
        # mean loglik of ancestral draws under the model approaches the
        # model's expected loglik (estimated from an independent batch)
        structure, params = two_facet_model()
        ct = build_clique_tree(structure)
        z1, _, _ = ancestral_sample(structure, params, 10_000, np.random.default_rng(7))
        z2, _, _ = ancestral_sample(structure, params, 10_000, np.random.default_rng(8))
        l1 = posterior_batch(ct, params, z1).loglik
        l2 = posterior_batch(ct, params, z2).loglik
        stderr = np.hypot(l1.std() / 100, l2.std() / 100)
        assert abs(l1.mean() - l2.mean()) < 3 * stderr


class TestComponentSample:
    def test_fixed_assignment_means(self):
        structure, params = two_facet_model()
        z, _ = component_sample(structure, params, {"Y0": 1, "Y1": 0}, 5000, np.random.default_rng(2))
        assert np.all(np.abs(z[:, :2].mean(axis=0) - [3.0, 3.0]) < 3 * np.sqrt(0.25 / 5000) + 0.05)
        assert np.all(np.abs(z[:, 2:].mean(axis=0) - [-3.0, -3.0]) < 3 * np.sqrt(0.25 / 5000) + 0.05)

    def test_invalid_state_rejected(self):
        structure, params = two_facet_model()
        with pytest.raises(ValueError, match="out of range"):
            component_sample(structure, params, {"Y0": 2, "Y1": 0}, 5, np.random.default_rng(0))

    def test_missing_latent_rejected(self):
        structure, params = two_facet_model()
        with pytest.raises(ValueError, match="missing"):
            component_sample(structure, params, {"Y0": 0}, 5, np.random.default_rng(0))

    def test_single_component_matches_ancestral(self):
        structure, params = single_latent_model(card=1, dim=2, mean=[[1.0, -1.0]], var=0.5)
        za, _, _ = ancestral_sample(structure, params, 4000, np.random.default_rng(5))
        zc, _ = component_sample(structure, params, {"Y0": 0}, 4000, np.random.default_rng(6))
        stderr = np.sqrt(0.5 / 4000) * np.sqrt(2)
        assert np.all(np.abs(za.mean(axis=0) - zc.mean(axis=0)) < 3 * stderr)


class TestSampleLatentsGiven:
    def test_clamped_states_respected(self):
        structure, params = two_facet_model()
        clamp = {"Y0": np.array([1, 1, 0, 0])}
        out = sample_latents_given(structure, params, clamp, 4, np.random.default_rng(0))
        assert np.array_equal(out["Y0"], clamp["Y0"])

    def test_conditional_distribution_correct(self):
        # chain Y0 -> Y1 with a skewed CPT: clamping Y0 must reproduce the
        # CPT row frequencies for Y1
        latents = [LatentNode("Y0", 2, None), LatentNode("Y1", 2, "Y0")]
        pouches = [PouchNode("P0", (0,), "Y0"), PouchNode("P1", (1,), "Y1")]
        structure = LatentStructure(latents, pouches)
        cpt = np.array([[0.9, 0.1], [0.3, 0.7]])
        params = TreeParameters(
            np.array([0.5, 0.5]),
            {"Y1": cpt},
            {"P0": np.zeros((2, 1)), "P1": np.zeros((2, 1))},
            {"P0": np.ones((2, 1)), "P1": np.ones((2, 1))},
        )
        n = 40_000
        clamp = {"Y0": np.zeros(n, dtype=int)}
        out = sample_latents_given(structure, params, clamp, n, np.random.default_rng(4))
        freq = out["Y1"].mean()
        assert abs(freq - 0.1) < 3 * np.sqrt(0.1 * 0.9 / n)

    def test_child_evidence_flows_upward(self):
        # clamping the child must tilt the sampled parent by Bayes rule
        latents = [LatentNode("Y0", 2, None), LatentNode("Y1", 2, "Y0")]
        pouches = [PouchNode("P0", (0,), "Y0"), PouchNode("P1", (1,), "Y1")]
        structure = LatentStructure(latents, pouches)
        cpt = np.array([[0.9, 0.1], [0.3, 0.7]])
        params = TreeParameters(
            np.array([0.5, 0.5]),
            {"Y1": cpt},
            {"P0": np.zeros((2, 1)), "P1": np.zeros((2, 1))},
            {"P0": np.ones((2, 1)), "P1": np.ones((2, 1))},
        )
        n = 40_000
        clamp = {"Y1": np.ones(n, dtype=int)}
        out = sample_latents_given(structure, params, clamp, n, np.random.default_rng(5))
        # P(Y0=1 | Y1=1) = 0.5*0.7 / (0.5*0.1 + 0.5*0.7) = 0.875
        freq = out["Y0"].mean()
        assert abs(freq - 0.875) < 3 * np.sqrt(0.875 * 0.125 / n)


class TestConditionalGenerate:
    def _setup(self, n=400, seed=0):
        structure, params = two_facet_model()
        encoder, decoder = identity_codec()
        data = generate_synthetic(SyntheticSpec(n_samples=n, seed=seed))
        return structure, params, encoder, decoder, data

    def test_overlap_rejected(self):
        structure, params, encoder, decoder, data = self._setup()
        with pytest.raises(ValueError, match="both fixed and resampled"):
            conditional_generate(
                structure, params, encoder, data.z_true[:5], ["Y0"],
                np.random.default_rng(0), fixed_facet="Y0",
            )

    def test_empty_resample_is_map_component_draw(self):
        structure, params, encoder, decoder, data = self._setup(n=50)
        x_in = data.z_true[:50]
        z1, _, a1 = conditional_generate(
            structure, params, encoder, x_in, [], np.random.default_rng(1)
        )
        z2, _, a2 = conditional_generate(
            structure, params, encoder, x_in, [], np.random.default_rng(2)
        )
        # assignments identical (MAP), codes differ only by Gaussian noise
        assert np.array_equal(a1["Y0"], a2["Y0"])
        assert np.array_equal(a1["Y1"], a2["Y1"])
        assert np.all(np.abs(z1 - z2) < 6 * np.sqrt(0.25))

    def test_fixed_facet_keeps_classifier_prediction(self):
        structure, params, encoder, decoder, data = self._setup(n=400, seed=11)
        x_in = data.z_true
        gmm = GaussianMixture(2, random_state=0).fit(x_in[:, :2])
        before = gmm.predict(x_in[:, :2])
        z, _, _ = conditional_generate(
            structure, params, encoder, x_in, ["Y1"],
            np.random.default_rng(3), fixed_facet="Y0",
        )
        after = gmm.predict(z[:, :2])
        assert (before == after).mean() >= 0.95

    def test_resampled_facet_mixes(self):
        structure, params, encoder, decoder, data = self._setup(n=500, seed=12)
        z, _, assign = conditional_generate(
            structure, params, encoder, data.z_true, ["Y1"],
            np.random.default_rng(4), fixed_facet="Y0",
        )
        # uniform CPT: the resampled facet should land on both states
        counts = np.bincount(assign["Y1"], minlength=2)
        assert counts.min() > 100

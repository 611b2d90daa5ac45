import json

import numpy as np
import pytest

from ccmtad import clustering
from ccmtad.clustering import ClusterAssignment
from ccmtad.data import SynthSpec, synth_generate
from ccmtad.errors import ContractViolation


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all(len(set(b[a == k])) == 1 for k in set(a)) and len(set(a)) == len(set(b))


@pytest.fixture(scope="module")
def planted():
    spec = SynthSpec(block_sizes=(4, 4, 4), length=4000, seed=2)
    return synth_generate(spec), np.repeat([0, 1, 2], 4)


class TestProfiles:
    def test_constant_channel_has_zero_profile(self, rng):
        x = rng.standard_normal((100, 3))
        x[:, 1] = 2.0
        prof = clustering.compute_profiles(x)
        assert prof.zero_profile.tolist() == [1]
        assert prof.active.tolist() == [0, 2]
        assert np.all(prof.phi_abs[1] == 0) and np.all(prof.phi_abs[:, 1] == 0)

    def test_similarity_graph_properties(self, rng):
        prof = clustering.compute_profiles(rng.standard_normal((200, 5)))
        w = clustering.profile_similarity_graph(prof.phi_abs)
        assert np.allclose(w, w.T) and np.all(np.diag(w) == 0)
        assert w.min() >= 0 and w.max() <= 1

    def test_similarity_graph_rejects_zero_rows(self):
        with pytest.raises(ContractViolation):
            clustering.profile_similarity_graph(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_laplacian_spectrum(self, rng):
        a = rng.uniform(0, 1, (6, 6))
        w = (a + a.T) / 2
        np.fill_diagonal(w, 0)
        lap = clustering.normalized_laplacian(w)
        vals = np.linalg.eigvalsh(lap)
        assert vals[0] == pytest.approx(0.0, abs=1e-12)
        assert vals[-1] <= 2.0 + 1e-12
        d = w.sum(axis=1)
        np.testing.assert_allclose(lap @ np.sqrt(d), 0.0, atol=1e-12)


class TestSpectralCluster:
    def test_recovers_planted_blocks(self, planted):
        ds, truth = planted
        a = clustering.spectral_cluster(clustering.compute_profiles(ds.values), 3, seed=0)
        assert same_partition(a.labels, truth)

    def test_labels_canonical_and_deterministic(self, planted):
        ds, _ = planted
        prof = clustering.compute_profiles(ds.values)
        a, b = clustering.spectral_cluster(prof, 3, 0), clustering.spectral_cluster(prof, 3, 0)
        assert np.array_equal(a.labels, b.labels)
        assert a.labels[0] == 0

    def test_zero_profile_channels_get_last_cluster(self):
        ds = synth_generate(SynthSpec(block_sizes=(3, 3), n_constant=2, length=3000, seed=1))
        a = clustering.spectral_cluster(clustering.compute_profiles(ds.values), 3, seed=0)
        assert a.labels[-2:].tolist() == [2, 2]
        assert same_partition(a.labels[:6], np.repeat([0, 1], 3))

    def test_single_cluster(self, planted):
        ds, _ = planted
        a = clustering.spectral_cluster(clustering.compute_profiles(ds.values), 1)
        assert set(a.labels) == {0}

    def test_invalid_m(self, planted):
        prof = clustering.compute_profiles(planted[0].values)
        with pytest.raises(ValueError):
            clustering.spectral_cluster(prof, 13)

    def test_select_cluster_count(self, planted):
        ds, _ = planted
        best, cands = clustering.select_cluster_count(clustering.compute_profiles(ds.values), range(2, 6), 0)
        assert best == 3
        assert [c.n_clusters for c in cands] == [2, 3, 4, 5]
        assert all(c.assignment.silhouette == c.silhouette for c in cands)


class TestVariants:
    @pytest.mark.parametrize("strategy", ["profile-spectral", "kmeans-profiles"])
    def test_profile_strategies_recover_blocks(self, planted, strategy):
        ds, truth = planted
        a = clustering.cluster_variants(strategy, 3, seed=0, train_values=ds.values)
        assert a.strategy == strategy and a.n_clusters == 3
        assert same_partition(a.labels, truth)

    @pytest.mark.parametrize("strategy", clustering.STRATEGIES)
    def test_every_strategy_returns_valid_assignment(self, planted, strategy):
        a = clustering.cluster_variants(strategy, 3, seed=0, train_values=planted[0].values)
        assert sorted(set(a.labels)) == [0, 1, 2] and a.labels[0] == 0

    def test_channel_similarity_ignores_anticorrelation(self, rng):
        # raw cosine similarity keeps only positive alignment, so a sign-flipped
        # copy of a channel is not linked to it
        z = rng.standard_normal(500)
        x = np.stack([z, z + 0.01 * rng.standard_normal(500), -z], axis=1)
        w = clustering.channel_similarity_graph(x)
        assert w[0, 1] > 0.99 and w[0, 2] == 0.0

    def test_abs_corr_graph_zero_diagonal(self, planted):
        w = clustering.abs_corr_graph(clustering.compute_profiles(planted[0].values))
        assert np.all(np.diag(w) == 0)

    def test_unknown_strategy(self, planted):
        with pytest.raises(ValueError):
            clustering.cluster_variants("nope", 2, train_values=planted[0].values)


class TestAssignment:
    def test_json_round_trip(self):
        a = ClusterAssignment(np.array([0, 1, 1, 0]), 2, "profile-spectral", 0.5)
        b = ClusterAssignment.from_dict(json.loads(a.to_json()))
        assert np.array_equal(a.labels, b.labels) and b.silhouette == 0.5
        assert b.sizes.tolist() == [2, 2] and b.members(1).tolist() == [1, 2]

    def test_labels_must_cover_all_clusters(self):
        with pytest.raises(ContractViolation):
            ClusterAssignment(np.array([0, 2]), 3)

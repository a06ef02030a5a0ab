# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import os
import tempfile

import numpy as np
from django.test import SimpleTestCase

from ddrm.backend import EmbeddingTable
from ddrm.diffusion import DenoiserParams, build_schedule, forward_to_t, reconstruct
from ddrm.exceptions import ColdUserError, ContractViolation
from ddrm.inference import (
    RankedList, average_liked_embedding, generate_ideal_item, generate_ideal_items, round_to_items, top_k,
    write_recommendations,
)
from ddrm.numerics import Rng, derive_seed

from .fixtures import dataset_from_rows, tiny_manifest, tiny_tables


class InferenceTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.ds = tiny_manifest(self.tmp.name)
        self.tables = tiny_tables()
        self.params = DenoiserParams.initialize(2, 4, 1, Rng(0))
        self.schedule = build_schedule(5, 0.1, 0.01, 0.05)


class TestAverageLikedEmbedding(InferenceTestCase):
    def test_mean_of_train_items(self):
        np.testing.assert_allclose(average_liked_embedding(0, self.ds, self.tables), [4.5, 0.0])
        np.testing.assert_allclose(average_liked_embedding(1, self.ds, self.tables), [3.0, 0.0])

    def test_cold_user(self):
        rows = [(0, i, 5, i) for i in range(8)] + [(1, 0, 5, 100), (1, 1, 5, 101)]
        ds = dataset_from_rows(self.tmp.name, rows)
        tables = tiny_tables()
        with self.assertRaises(ColdUserError) as ctx:
            average_liked_embedding(1, ds, tables)
        self.assertEqual(ctx.exception.user, 1)


class TestGenerateIdealItem(InferenceTestCase):
    def test_single_step_chain_returns_the_prediction(self):
        schedule = build_schedule(1, 0.1, 0.01, 0.05)
        noise = Rng(9).standard_normal((1, 2))[0]
        start = forward_to_t(average_liked_embedding(0, self.ds, self.tables), 1, schedule, noise=noise)
        expected = reconstruct(start, self.tables.user_emb[0], self.params)
        generated = generate_ideal_item(0, self.ds, self.tables, self.params, schedule, Rng(9))
        np.testing.assert_allclose(generated, expected)

    def test_zero_denoiser_collapses_to_zero(self):
        params = DenoiserParams.initialize(2, 4, 1, Rng(0), zero=True)
        generated = generate_ideal_item(0, self.ds, self.tables, params, self.schedule, Rng(1))
        np.testing.assert_allclose(generated, np.zeros(2), atol=1e-12)

    def test_batch_matches_single_users(self):
        batch = generate_ideal_items([0, 1], self.ds, self.tables, self.params, self.schedule, seed=4)
        for row, user in enumerate((0, 1)):
            rng = Rng(derive_seed(4, 'infer', user))
            single = generate_ideal_item(user, self.ds, self.tables, self.params, self.schedule, rng)
            np.testing.assert_allclose(batch[row], single)

    def test_batching_does_not_change_results(self):
        both = generate_ideal_items([0, 1], self.ds, self.tables, self.params, self.schedule, seed=4)
        alone = generate_ideal_items([1], self.ds, self.tables, self.params, self.schedule, seed=4)
        np.testing.assert_allclose(both[1], alone[0])

    def test_stochastic_and_pure_noise(self):
        plain = generate_ideal_items([0], self.ds, self.tables, self.params, self.schedule, seed=4)
        sampled = generate_ideal_items([0], self.ds, self.tables, self.params, self.schedule, seed=4, stochastic=True)
        self.assertFalse(np.allclose(plain, sampled))
        noise_start = generate_ideal_items([0], self.ds, self.tables, self.params, self.schedule, seed=4,
                                           start='pure_noise')
        self.assertEqual(noise_start.shape, (1, 2))
        self.assertTrue(np.all(np.isfinite(noise_start)))

    def test_unknown_start(self):
        with self.assertRaises(ContractViolation):
            generate_ideal_items([0], self.ds, self.tables, self.params, self.schedule, seed=0, start='zeros')

    def test_no_users(self):
        self.assertEqual(generate_ideal_items([], self.ds, self.tables, self.params, self.schedule, 0).shape, (0, 2))


class TestTopK(SimpleTestCase):
    def test_ties_and_exclusions(self):
        items, scores = top_k(np.array([1.0, 3.0, 3.0, 2.0]), [[]], 2)
        np.testing.assert_array_equal(items, [1, 2])
        np.testing.assert_array_equal(scores, [3.0, 3.0])
        items, _ = top_k(np.array([1.0, 3.0, 3.0, 2.0]), [[1]], 2)
        np.testing.assert_array_equal(items, [2, 3])

    def test_rows(self):
        picked = top_k(np.array([[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]]), [[2], []], 1)
        np.testing.assert_array_equal([items for items, _ in picked], [[1], [0]])

    def test_fewer_candidates_than_k(self):
        items, _ = top_k(np.array([1.0, 2.0, 3.0]), [[0, 2]], 5)
        np.testing.assert_array_equal(items, [1])


class TestRoundToItems(InferenceTestCase):
    def test_ranked_list(self):
        ranked = round_to_items(np.array([0.0, 1.0]), self.tables, [3], 2, user_id=7)
        self.assertIsInstance(ranked, RankedList)
        self.assertEqual(ranked.user_id, 7)
        np.testing.assert_array_equal(ranked.items, [4, 0])
        self.assertFalse(ranked.truncated)

    def test_truncated(self):
        ranked = round_to_items(np.array([1.0, 0.0]), self.tables, [0, 1, 2], 5)
        self.assertEqual(len(ranked), 2)
        self.assertTrue(ranked.truncated)

    def test_invalid(self):
        with self.assertRaises(ContractViolation):
            round_to_items(np.array([1.0, 0.0]), self.tables, [], 0)
        with self.assertRaises(ContractViolation):
            round_to_items(np.array([1.0, 0.0, 0.0]), self.tables, [], 1)


class TestWriteRecommendations(InferenceTestCase):
    def test_raw_ids(self):
        lists = [RankedList(1, np.array([3, 0]), np.array([0.5, 0.25]))]
        path = os.path.join(self.tmp.name, 'recommendations.csv')
        write_recommendations(lists, path, user_ids=np.array([10, 11]), item_ids=np.array([20, 21, 22, 23, 24]))
        with open(path) as f:
            self.assertEqual(f.read(), 'user_id,rank,item_id,score\n11,1,23,0.5\n11,2,20,0.25\n')


class TestRoundingProperties(SimpleTestCase):
    def setUp(self):
        self.catalog = EmbeddingTable(np.zeros((1, 12)), np.eye(12))

    def test_own_embedding_ranks_first(self):
        ranked = round_to_items(self.catalog.item_emb[7], self.catalog, [], 3)
        self.assertEqual(ranked.items[0], 7)

    def test_positive_scaling_keeps_the_order(self):
        generator = np.random.default_rng(0)
        tables = EmbeddingTable(np.zeros((1, 4)), generator.standard_normal((20, 4)))
        vector = generator.standard_normal(4)
        a = round_to_items(vector, tables, [2, 5], 10)
        b = round_to_items(3.5 * vector, tables, [2, 5], 10)
        np.testing.assert_array_equal(a.items, b.items)

    def test_matches_a_full_sort(self):
        generator = np.random.default_rng(1)
        tables = EmbeddingTable(np.zeros((1, 4)), generator.standard_normal((20, 4)))
        vector = generator.standard_normal(4)
        scores = tables.item_emb @ vector
        expected = [item for item in sorted(range(20), key=lambda item: -scores[item]) if item not in (0, 3)][:6]
        np.testing.assert_array_equal(round_to_items(vector, tables, [0, 3], 6).items, expected)

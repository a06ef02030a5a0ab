# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

import math
import os
import tempfile
from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from scipy.special import expit

from ddrm import autograd as ad
from ddrm.backend import (
    BackendConfig, EmbeddingTable, PretrainRecord, bpr_graph, bpr_loss, initial_table, normalized_adjacency, pretrain,
    propagate_light_graph, read_embeddings, write_embeddings, write_pretrain_log,
)
from ddrm.evaluation import BackendRanker, evaluate
from ddrm.exceptions import CheckpointError, ContractViolation
from ddrm.numerics import Rng

from .fixtures import dataset_from_rows, numeric_gradient, planted_blocks, random_tables, relative_error


class BackendTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def path(self, name):
        return os.path.join(self.tmp.name, name)


class TestEmbeddingTable(SimpleTestCase):
    def test_read_only(self):
        table = random_tables(3, 4, 2)
        with self.assertRaises(ValueError):
            table.user_emb[0, 0] = 1.0
        self.assertEqual((table.num_users, table.num_items, table.dim), (3, 4, 2))

    def test_dimension_mismatch(self):
        with self.assertRaises(ContractViolation):
            EmbeddingTable(np.zeros((3, 2)), np.zeros((4, 3)))

    def test_non_finite(self):
        with self.assertRaises(ContractViolation):
            EmbeddingTable(np.array([[np.nan, 0.0]]), np.zeros((1, 2)))

    def test_fingerprint_tracks_content(self):
        self.assertEqual(random_tables(3, 4, 2).fingerprint(), random_tables(3, 4, 2).fingerprint())
        self.assertNotEqual(random_tables(3, 4, 2).fingerprint(), random_tables(3, 4, 2, seed=1).fingerprint())


class TestBPRLoss(SimpleTestCase):
    def test_equal_scores(self):
        self.assertAlmostEqual(bpr_loss([1.0, 0.0], [1.0, 0.0], [1.0, 0.0]), math.log(2))

    def test_large_margin_is_stable(self):
        self.assertAlmostEqual(bpr_loss([1.0], [1000.0], [-1000.0]), 0.0)
        self.assertAlmostEqual(bpr_loss([1.0], [-1000.0], [1000.0]), 2000.0)

    def test_rows(self):
        losses = bpr_loss(np.ones((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)))
        np.testing.assert_allclose(losses, [math.log(2)] * 3)

    def test_shape_mismatch(self):
        with self.assertRaises(ContractViolation):
            bpr_loss([1.0, 0.0], [1.0], [1.0, 0.0])

    def test_gradient_matches_finite_differences(self):
        def builder(p):
            return ad.reduce_sum(bpr_graph(p['u'], p['i'], p['j']))

        def value(p):
            return float(np.sum(bpr_loss(p['u'], p['i'], p['j'])))

        for seed in range(20):
            generator = np.random.default_rng(seed)
            values = {name: generator.standard_normal((5, 8)) for name in ('u', 'i', 'j')}
            analytic = ad.grad(builder, values)
            numeric = numeric_gradient(value, values, h=1e-3)
            for name in values:
                self.assertLess(relative_error(analytic[name], numeric[name]), 1e-4, (seed, name))
            margin = np.sum(values['u'] * (values['i'] - values['j']), axis=1, keepdims=True)
            np.testing.assert_allclose(analytic['i'], -expit(-margin) * values['u'])


class TestBackendConfig(SimpleTestCase):
    def test_invalid(self):
        for kwargs in [{'kind': 'svd'}, {'lr': 0}, {'l2': -1}, {'dim': 0}, {'kind': 'light_graph', 'layers': 0}]:
            with self.assertRaises(ContractViolation, msg=repr(kwargs)):
                BackendConfig(**kwargs)


class TestLightGraph(BackendTestCase):
    def setUp(self):
        super().setUp()
        rows = [(0, 0, 5, 1), (0, 1, 5, 2), (1, 1, 5, 3)]
        self.ds = dataset_from_rows(self.tmp.name, rows + [(2, 2, 5, 4)], ratios=(0.75, 0.0, 0.25))

    def test_normalized_adjacency(self):
        adjacency = normalized_adjacency(self.ds).toarray()
        np.testing.assert_allclose(adjacency, adjacency.T)
        # user 0 has degree 2, item 1 has degree 2
        self.assertAlmostEqual(adjacency[0, 3 + 1], 0.5)
        self.assertAlmostEqual(adjacency[1, 3 + 1], 1 / math.sqrt(2))
        # user 2 and item 2 only appear in test: unit self-loops
        self.assertEqual(adjacency[2, 2], 1.0)
        self.assertEqual(adjacency[5, 5], 1.0)

    def test_zero_layers_is_identity(self):
        table = random_tables(3, 3, 2)
        self.assertIs(propagate_light_graph(table, self.ds, 0), table)

    def test_one_layer_mean(self):
        table = random_tables(3, 3, 2)
        propagated = propagate_light_graph(table, self.ds, 1)
        nodes = table.stacked()
        expected = 0.5 * (nodes + normalized_adjacency(self.ds) @ nodes)
        np.testing.assert_allclose(propagated.stacked(), expected)
        np.testing.assert_allclose(propagated.user_emb[2], table.user_emb[2])

    def test_size_mismatch(self):
        with self.assertRaises(ContractViolation):
            propagate_light_graph(random_tables(2, 3, 2), self.ds, 1)


class TestPretrain(BackendTestCase):
    def setUp(self):
        super().setUp()
        self.ds = dataset_from_rows(self.tmp.name, planted_blocks(num_users=40, num_items=20, per_user=6, seed=3))

    def test_zero_epochs(self):
        cfg = BackendConfig(dim=4, epochs=0)
        table = pretrain(self.ds, cfg, Rng(1))
        self.assertEqual((table.num_users, table.num_items, table.dim), (40, 20, 4))
        self.assertLess(np.abs(table.user_emb).max(), 1.0)

    def test_zero_epochs_by_kind(self):
        mf = BackendConfig(dim=4, epochs=0)
        np.testing.assert_array_equal(
            pretrain(self.ds, mf, Rng(1)).user_emb, initial_table(40, 20, mf, Rng(1)).user_emb,
        )
        graph = BackendConfig(kind='light_graph', dim=4, epochs=0, layers=2)
        expected = propagate_light_graph(initial_table(40, 20, graph, Rng(1)), self.ds, 2)
        table = pretrain(self.ds, graph, Rng(1))
        np.testing.assert_allclose(table.user_emb, expected.user_emb)
        np.testing.assert_allclose(table.item_emb, expected.item_emb)

    def test_loss_decreases_and_is_traced(self):
        trace = []
        pretrain(self.ds, BackendConfig(dim=8, epochs=15, batch_size=32, lr=0.1), Rng(1), trace=trace)
        self.assertEqual([r.epoch for r in trace], list(range(1, 16)))
        self.assertLess(trace[-1].loss, trace[0].loss)

    def test_learns_the_planted_blocks(self):
        table = pretrain(self.ds, BackendConfig(dim=8, epochs=30, batch_size=32, lr=0.1), Rng(1))
        scores = table.user_emb @ table.item_emb.T
        raw_users = self.ds.user_ids[:, None]
        raw_items = self.ds.item_ids[None, :]
        within = (raw_users < 20) == (raw_items < 10)
        self.assertGreater(scores[within].mean(), scores[~within].mean())

    def test_deterministic(self):
        cfg = BackendConfig(dim=4, epochs=3, batch_size=32)
        self.assertEqual(pretrain(self.ds, cfg, Rng(5)).fingerprint(), pretrain(self.ds, cfg, Rng(5)).fingerprint())

    def test_light_graph(self):
        trace = []
        cfg = BackendConfig(kind='light_graph', dim=4, epochs=5, batch_size=32, lr=0.1, layers=2)
        table = pretrain(self.ds, cfg, Rng(2), trace=trace)
        self.assertEqual(table.dim, 4)
        self.assertLess(trace[-1].loss, trace[0].loss)


@skipUnless(settings.ENABLE_SLOW_TESTS, 'Slow tests are disabled (set DDRM_SLOW_TESTS=1).')
class TestPlantedStructure(BackendTestCase):
    def test_mf_bpr_beats_random_ranking(self):
        ds = dataset_from_rows(self.tmp.name, planted_blocks(seed=0))
        table = pretrain(ds, BackendConfig(dim=16, epochs=30, lr=0.05), Rng(0))
        report = evaluate(BackendRanker(table), ds, ks=(20,))
        # Ranking the ~90 unseen items at random recalls about 0.22.
        self.assertGreater(report.mean('recall', 20), 0.3)


class TestEmbeddingCheckpoint(BackendTestCase):
    def test_round_trip(self):
        table = random_tables(5, 7, 4)
        write_embeddings(table, self.path('embeddings.bin'))
        loaded = read_embeddings(self.path('embeddings.bin'))
        self.assertEqual((loaded.num_users, loaded.num_items, loaded.dim), (5, 7, 4))
        np.testing.assert_allclose(loaded.item_emb, table.item_emb, rtol=1e-6)

    def test_file_size(self):
        write_embeddings(random_tables(5, 7, 4), self.path('embeddings.bin'))
        self.assertEqual(os.path.getsize(self.path('embeddings.bin')), 8 + 12 + 12 * 4 * 4)

    def test_bad_magic(self):
        with open(self.path('embeddings.bin'), 'wb') as f:
            f.write(b'GARBAGE!' + bytes(12))
        with self.assertRaises(CheckpointError):
            read_embeddings(self.path('embeddings.bin'))

    def test_truncated(self):
        write_embeddings(random_tables(2, 2, 2), self.path('embeddings.bin'))
        with open(self.path('embeddings.bin'), 'rb') as f:
            payload = f.read()
        with open(self.path('embeddings.bin'), 'wb') as f:
            f.write(payload[:-1])
        with self.assertRaises(CheckpointError):
            read_embeddings(self.path('embeddings.bin'))


class TestPretrainLog(BackendTestCase):
    def test_columns(self):
        write_pretrain_log([PretrainRecord(1, 0.5, 2.0)], self.path('log.csv'), header='# seed=1', wall_time=False)
        with open(self.path('log.csv')) as f:
            self.assertEqual(f.read(), '# seed=1\nepoch,loss,seconds\n1,0.5,0.0\n')

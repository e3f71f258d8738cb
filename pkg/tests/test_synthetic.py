"""Data generation and the brute-force oracles."""

import json
import math

import numpy as np
import pytest

from helpers import random_model
from mlcirt.data import Schema, aggregate, ingest_csv, make_dataset
from mlcirt.model import ModelSpec, ParameterSet
from mlcirt.synthetic import (
    MAX_ENUM_ITEMS,
    GeneratorSpec,
    balanced_groups,
    brute_force_loglik,
    brute_force_manifest,
    default_generator,
    emit,
    simulate,
)


class TestSimulate:

    def test_dominant_class(self):
        spec = ModelSpec.unidimensional(3, 2)
        p = ParameterSet([1 - 1e-15, 1e-15], [[-40.0], [40.0]], np.zeros(3), np.ones(3))
        data = simulate(GeneratorSpec(p, spec, {(): 500}, seed=3))
        assert data.responses.sum() == 0

    def test_logit_zero_rate(self):
        spec = ModelSpec.unidimensional(4, 1)
        p = ParameterSet([1.0], [[0.0]], np.zeros(4), np.ones(4))
        n = 10000
        data = simulate(GeneratorSpec(p, spec, {(): n}, seed=11))
        band = 3 * math.sqrt(0.25 / n)
        assert np.all(np.abs(data.responses.mean(axis=0) - 0.5) < band)

    def test_pattern_frequencies_match_manifest(self):
        spec = ModelSpec.unidimensional(4, 2, n_categories=(2,))
        phi = np.zeros((2, 4))
        phi[1] = [0.0, 0.4, -0.3, 0.2]
        p = ParameterSet([0.4, 0.6], [[-0.8], [1.1]], [0.0, 0.3, -0.2, 0.5],
                         [1.0, 1.2, 0.8, 1.5], (phi,))
        n = 50000
        data = simulate(GeneratorSpec(p, spec, {(1,): n}, seed=2))
        oracle = brute_force_manifest(spec, p, (1,))
        f = aggregate(data)
        emp = {tuple(y): c / n for y, c in zip(f.patterns.tolist(), f.counts)}
        tv = 0.5 * sum(abs(emp.get(y, 0.0) - q) for y, q in oracle.items())
        assert tv < 0.03

    def test_reproducible(self):
        g = default_generator(500, seed=9)
        assert simulate(g) == simulate(g)
        assert not simulate(default_generator(500, seed=10)) == simulate(g)

    def test_groups_carried(self):
        g = default_generator(101, seed=0)
        data = simulate(g)
        assert data.n_subjects == 101
        assert sorted(np.bincount(data.memberships[:, 0]).tolist()) == [50, 51]

    def test_invalid_generator(self):
        spec = ModelSpec.unidimensional(2, 1, n_categories=(2,))
        p = ParameterSet([1.0], [[0.0]], [0.0, 0.0], [1.0, 1.0], (np.zeros((2, 2)),))
        with pytest.raises(ValueError):
            GeneratorSpec(p, spec, {(0,): 0})

    def test_balanced_groups(self):
        sizes = balanced_groups(10, (2, 3))
        assert sum(sizes.values()) == 10 and len(sizes) == 6
        assert max(sizes.values()) - min(sizes.values()) <= 1

    def test_emit_round_trip(self, tmp_path):
        g = default_generator(300, seed=4)
        paths = emit(g, tmp_path)
        schema = Schema.load(paths["schema"])
        assert ingest_csv(paths["data"], schema) == simulate(g)
        truth = json.loads(paths["truth"].read_text())
        back = ParameterSet.from_dict(truth["params"])
        np.testing.assert_array_equal(back.beta, g.true_params.beta)
        assert ModelSpec.from_dict(truth["spec"]) == g.spec


class TestOracles:

    def test_single_item_logit_zero(self):
        spec = ModelSpec.unidimensional(1, 1)
        p = ParameterSet([1.0], [[0.0]], [0.0], [1.0])
        assert brute_force_manifest(spec, p, ()) == {(0,): 0.5, (1,): 0.5}

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one(self, seed):
        spec, p = random_model(seed, r_max=10)
        total = math.fsum(brute_force_manifest(spec, p, (0, 0)).values())
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_complement_symmetry(self):
        spec = ModelSpec.unidimensional(4, 2)
        p = ParameterSet([0.5, 0.5], [[-0.9], [0.9]], np.zeros(4), np.ones(4))
        m = brute_force_manifest(spec, p, ())
        for y, q in m.items():
            assert q == pytest.approx(m[tuple(1 - v for v in y)], rel=1e-14)

    def test_enumeration_bound(self):
        r = MAX_ENUM_ITEMS + 1
        spec = ModelSpec.unidimensional(r, 1)
        p = ParameterSet([1.0], [[0.0]], np.zeros(r), np.ones(r))
        with pytest.raises(ValueError, match="limited"):
            brute_force_manifest(spec, p, ())
        with pytest.raises(ValueError, match="limited"):
            brute_force_loglik(aggregate(make_dataset(np.zeros((1, r), dtype=int))), spec, p)

    def test_loglik_single_subject(self):
        spec = ModelSpec.unidimensional(2, 1)
        p = ParameterSet([1.0], [[0.0]], [0.0, 0.0], [1.0, 1.0])
        ll = brute_force_loglik(aggregate(make_dataset([[1, 0]])), spec, p)
        assert ll == pytest.approx(math.log(0.25), abs=1e-15)

    def test_loglik_order_invariant(self):
        spec, p = random_model(8, r_max=5, n_criteria=0)
        y = np.random.default_rng(0).integers(0, 2, size=(40, spec.r))
        a = brute_force_loglik(aggregate(make_dataset(y)), spec, p)
        b = brute_force_loglik(aggregate(make_dataset(y[::-1])), spec, p)
        assert a == b

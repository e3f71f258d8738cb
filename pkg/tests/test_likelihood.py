"""Item, class-conditional and manifest probabilities and the log-likelihood."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import all_profiles, random_model, simulated_table
from mlcirt.data import Criterion, aggregate, make_dataset
from mlcirt.likelihood import (
    class_conditional,
    item_logit,
    log_likelihood,
    manifest,
    posterior,
    posterior_table,
)
from mlcirt.model import ModelSpec, ParameterSet
from mlcirt.synthetic import brute_force_loglik, brute_force_manifest


def one_item(xi=0.0, beta=0.0, gamma=1.0, k=1):
    spec = ModelSpec.unidimensional(1, k)
    pi = np.full(k, 1.0 / k)
    return spec, ParameterSet(pi, np.full((k, 1), xi), [beta], [gamma])


class TestItemLogit:

    def test_zero_logit(self):
        spec, p = one_item()
        assert item_logit(0, (), [0.0], spec, p) == 0.0

    def test_dif_example(self):
        spec = ModelSpec(1, (0, 0), n_categories=(2,))
        phi = np.array([[0.0, 0.0], [0.0, 0.5]])
        p = ParameterSet([1.0], [[0.0]], [0.0, 0.0], [1.0, 2.0], (phi,))
        t = item_logit(1, (1,), [1.0], spec, p)
        assert t == pytest.approx(1.0, abs=1e-15)
        assert 1 / (1 + math.exp(-t)) == pytest.approx(0.731059, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-4, 4), st.floats(-4, 4))
    def test_group_gap_free_of_theta(self, theta1, theta2):
        spec, p = random_model(3, n_criteria=2)
        j = spec.r - 1
        gap = [item_logit(j, (0, 1), [t] * spec.s, spec, p) / p.gamma[j]
               - item_logit(j, (1, 0), [t] * spec.s, spec, p) / p.gamma[j]
               for t in (theta1, theta2)]
        assert gap[0] == pytest.approx(gap[1], abs=1e-9)
        expect = p.phi[0][1, j] - p.phi[1][1, j]
        assert gap[0] == pytest.approx(expect, abs=1e-9)

    def test_monotone_in_ability(self):
        spec, p = random_model(7)
        p = p.copy(gamma=np.abs(p.gamma) + 0.1)
        for j in range(spec.r):
            vals = [item_logit(j, (0, 0), np.full(spec.s, t), spec, p) for t in np.linspace(-3, 3, 13)]
            assert np.all(np.diff(vals) > 0)


class TestClassConditional:

    def test_single_item(self):
        spec, p = one_item()
        assert class_conditional([0], (), 0, spec, p) == pytest.approx(0.5)
        assert class_conditional([1], (), 0, spec, p) == pytest.approx(0.5)

    def test_product_law(self):
        spec = ModelSpec(1, (0, 1))
        p = ParameterSet([1.0], [[0.3, -0.2]], [0.0, 0.0], [1.0, 1.0])
        p1, p2 = 1 / (1 + math.exp(-0.3)), 1 / (1 + math.exp(0.2))
        assert class_conditional([1, 1], (), 0, spec, p) == pytest.approx(p1 * p2, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one(self, seed):
        spec, p = random_model(seed, r_max=10)
        for c in range(spec.k):
            total = math.fsum(class_conditional(y, (1, 0), c, spec, p)
                              for y in itertools.product((0, 1), repeat=spec.r))
            assert total == pytest.approx(1.0, abs=1e-12)


class TestManifest:

    def test_k1_equals_class_conditional(self):
        spec, p = random_model(11)
        spec = spec.with_k(1)
        p = p.copy(pi=np.array([1.0]), xi=p.xi[:1])
        y = (1, 0) * (spec.r // 2) + (1,) * (spec.r % 2)
        assert manifest(y, (0, 1), spec, p) == pytest.approx(class_conditional(y, (0, 1), 0, spec, p))

    def test_complement_symmetry(self):
        spec = ModelSpec.unidimensional(5, 2)
        p = ParameterSet([0.5, 0.5], [[-1.3], [1.3]], np.zeros(5), np.ones(5))
        for y in itertools.product((0, 1), repeat=5):
            comp = tuple(1 - v for v in y)
            assert manifest(y, (), spec, p) == pytest.approx(manifest(comp, (), spec, p), rel=1e-13)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_normalized_per_group(self, seed):
        spec, p = random_model(seed, r_max=8)
        for prof in all_profiles(spec):
            total = math.fsum(manifest(y, prof, spec, p)
                              for y in itertools.product((0, 1), repeat=spec.r))
            assert total == pytest.approx(1.0, abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_enumeration(self, seed):
        spec, p = random_model(seed, r_max=8)
        prof = all_profiles(spec)[-1]
        oracle = brute_force_manifest(spec, p, prof)
        for y, q in oracle.items():
            assert abs(manifest(y, prof, spec, p) - q) <= 1e-10

    def test_rasch_sufficiency(self):
        spec = ModelSpec.from_groups([[0, 1, 2, 3], [4, 5, 6, 7]], 3)
        p = ParameterSet([0.2, 0.5, 0.3], [[-1.0, 0.5], [0.2, -0.4], [1.4, 1.1]],
                         [0.0, 0.4, -0.7, 1.1, 0.0, -0.3, 0.8, 0.2], np.ones(8))
        by_scores = {}
        for y in itertools.product((0, 1), repeat=8):
            key = (sum(y[:4]), sum(y[4:]))
            # with unit slopes, p(y) / exp(-sum beta_j y_j) depends on y only through key
            val = manifest(y, (), spec, p) * math.exp(float(np.dot(p.beta, y)))
            by_scores.setdefault(key, []).append(val)
        for vals in by_scores.values():
            assert max(vals) == pytest.approx(min(vals), rel=1e-12)


class TestLogLikelihood:

    def test_single_subject(self):
        spec, p = one_item()
        f = aggregate(make_dataset([[1]]))
        assert log_likelihood(f, spec, p) == pytest.approx(math.log(0.5))

    @pytest.mark.parametrize("seed", range(10))
    def test_frequency_form_matches_subject_form(self, seed):
        spec, p = random_model(seed, r_max=7)
        f = simulated_table(spec, p, 300, seed)
        assert abs(log_likelihood(f, spec, p) - brute_force_loglik(f, spec, p)) <= 1e-9

    def test_duplicating_subjects_doubles(self):
        spec, p = random_model(4, r_max=6)
        f = simulated_table(spec, p, 200, 1)
        prof, pat = f.expand()
        crit = [Criterion(f"q{q}", tuple(str(g) for g in range(h)))
                for q, h in enumerate(spec.n_categories)]
        f2 = aggregate(make_dataset(np.vstack([pat, pat]), np.vstack([prof, prof]), crit))
        assert log_likelihood(f2, spec, p) == pytest.approx(2 * log_likelihood(f, spec, p), rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_class_relabeling_invariant(self, seed):
        spec, p = random_model(seed)
        f = simulated_table(spec, p, 200, seed)
        perm = make_perm(spec.k, seed)
        q = p.copy(pi=p.pi[perm], xi=p.xi[perm])
        assert log_likelihood(f, spec, q) == pytest.approx(log_likelihood(f, spec, p), rel=1e-13)

    def test_finite_for_many_items_and_extreme_logits(self):
        r = 50
        spec = ModelSpec.unidimensional(r, 2)
        p = ParameterSet([0.5, 0.5], [[-30.0], [30.0]], np.r_[0.0, np.linspace(-5, 5, r - 1)],
                         np.r_[1.0, np.full(r - 1, 4.0)])
        y = np.random.default_rng(0).integers(0, 2, size=(20, r))
        ll = log_likelihood(aggregate(make_dataset(y)), spec, p)
        assert np.isfinite(ll)


def make_perm(k, seed):
    return np.random.default_rng(seed).permutation(k)


class TestPosterior:

    def test_single_class(self):
        spec, p = one_item()
        np.testing.assert_array_equal(posterior([1], (), spec, p), [1.0])

    def test_identical_classes_give_prior(self):
        spec = ModelSpec.unidimensional(3, 3)
        p = ParameterSet([0.2, 0.3, 0.5], np.full((3, 1), 0.4), [0.0, 0.5, -0.2], [1.0, 1.2, 0.7])
        np.testing.assert_allclose(posterior([1, 0, 1], (), spec, p), p.pi, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one(self, seed):
        spec, p = random_model(seed)
        f = simulated_table(spec, p, 100, seed)
        post = posterior_table(f, spec, p)
        np.testing.assert_allclose(post.sum(axis=0), 1.0, atol=1e-12)
        assert (post > 0).all()

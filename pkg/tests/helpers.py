"""Builders shared by the test modules."""

import numpy as np

from mlcirt.data import aggregate
from mlcirt.model import ModelSpec
from mlcirt.synthetic import GeneratorSpec, balanced_groups, make_rng, random_params, simulate


def random_spec(rng, r_max=10, k_max=4, n_criteria=2, per_item=False, rasch=False):
    """A random valid spec with up to ``n_criteria`` criteria of 2-3 categories."""
    r = int(rng.integers(2, r_max + 1))
    k = int(rng.integers(1, k_max + 1))
    if per_item:
        dims = tuple(range(r))
    else:
        s = int(rng.integers(1, min(r, 3) + 1))
        dims = tuple(int(d) for d in np.r_[np.arange(s), rng.integers(0, s, size=r - s)])
        dims = tuple(int(d) for d in rng.permutation(dims))
    cats = tuple(int(h) for h in rng.integers(2, 4, size=n_criteria))
    return ModelSpec(k, dims, n_categories=cats, rasch_mode=rasch)


def random_model(seed, **kw):
    rng = make_rng(seed)
    spec = random_spec(rng, **kw)
    return spec, random_params(spec, rng)


def simulated_table(spec, params, n, seed):
    g = GeneratorSpec(params, spec, balanced_groups(n, spec.n_categories), seed=seed)
    return aggregate(simulate(g))


def all_profiles(spec):
    import itertools

    return list(itertools.product(*[range(h) for h in spec.n_categories]))

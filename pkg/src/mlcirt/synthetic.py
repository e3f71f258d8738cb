"""Data generation and brute-force reference computations.

The oracles here deliberately avoid the vectorised kernels of
:mod:`mlcirt.likelihood`: probabilities are formed with scalar ``math``
calls, products and sums are naive, and totals use compensated summation.
They are slow and only meant for checking the main engine.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Criterion, DataError, FrequencyTable, ResponseDataset, default_item_names, write_csv
from .model import ModelSpec, ParameterSet

MAX_ENUM_ITEMS = 14


@dataclass(frozen=True)
class GeneratorSpec:
    """A fully specified data-generating model.

    ``group_sizes`` maps each group profile (tuple of category indices, one
    per criterion) to the number of subjects drawn from it.
    """

    true_params: ParameterSet
    spec: ModelSpec
    group_sizes: Mapping[tuple[int, ...], int]
    seed: int = 0
    criteria: tuple[Criterion, ...] | None = None
    item_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.true_params.validate(self.spec)
        for prof, n in self.group_sizes.items():
            if n <= 0:
                raise DataError("group sizes must be positive")
            if len(prof) != self.spec.n_criteria:
                raise DataError("group profile length must equal the number of criteria")

    def criteria_or_default(self) -> tuple[Criterion, ...]:
        if self.criteria is not None:
            return tuple(self.criteria)
        return tuple(
            Criterion(f"q{q + 1}", tuple(f"g{g + 1}" for g in range(h)))
            for q, h in enumerate(self.spec.n_categories)
        )


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; its output for a given seed is stable across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def _scalar_logit(spec: ModelSpec, p: ParameterSet, c: int, j: int, profile) -> float:
    shift = 0.0
    for q, g in enumerate(profile):
        shift += float(p.phi[q][g, j])
    return float(p.gamma[j]) * (float(p.xi[c, spec.dim_of_item[j]]) - float(p.beta[j]) - shift)


def _p_correct(t: float) -> float:
    return 1.0 / (1.0 + math.exp(-t))


def simulate(gspec: GeneratorSpec) -> ResponseDataset:
    """Draw subjects group by group: class from pi, then independent Bernoulli responses."""
    spec, p = gspec.spec, gspec.true_params
    rng = make_rng(gspec.seed)
    ys, ms = [], []
    for prof in sorted(gspec.group_sizes):
        n = int(gspec.group_sizes[prof])
        prob = np.array([[_p_correct(_scalar_logit(spec, p, c, j, prof)) for j in range(spec.r)]
                         for c in range(spec.k)])
        classes = rng.choice(spec.k, size=n, p=p.pi / p.pi.sum())
        u = rng.random((n, spec.r))
        ys.append((u < prob[classes]).astype(np.uint8))
        ms.append(np.tile(np.asarray(prof, dtype=np.int64), (n, 1)))
    responses = np.vstack(ys)
    return ResponseDataset(
        responses=responses,
        item_names=gspec.item_names or default_item_names(spec.r),
        criteria=gspec.criteria_or_default(),
        memberships=np.vstack(ms).reshape(len(responses), spec.n_criteria),
    )


def emit(gspec: GeneratorSpec, directory) -> dict[str, Path]:
    """Simulate and write ``data.csv``, ``schema.json`` and ``truth.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = simulate(gspec)
    paths = {"data": directory / "data.csv", "schema": directory / "schema.json",
             "truth": directory / "truth.json"}
    schema = write_csv(data, paths["data"])
    with open(paths["schema"], "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")
    truth = {
        "seed": gspec.seed,
        "spec": gspec.spec.to_dict(),
        "params": gspec.true_params.to_dict(),
        "group_sizes": [[list(k), v] for k, v in sorted(gspec.group_sizes.items())],
    }
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2)
        fh.write("\n")
    return paths


def all_patterns(r: int):
    return itertools.product((0, 1), repeat=r)


def brute_force_manifest(spec: ModelSpec, params: ParameterSet, group_profile) -> dict[tuple, float]:
    """Manifest probability of every one of the 2^r patterns by direct enumeration."""
    if spec.r > MAX_ENUM_ITEMS:
        raise ValueError(f"enumeration is limited to {MAX_ENUM_ITEMS} items")
    profile = tuple(int(g) for g in group_profile)
    probs = [[_p_correct(_scalar_logit(spec, params, c, j, profile)) for j in range(spec.r)]
             for c in range(spec.k)]
    out = {}
    for y in all_patterns(spec.r):
        terms = []
        for c in range(spec.k):
            prod = float(params.pi[c])
            for j, yj in enumerate(y):
                prod *= probs[c][j] if yj else 1.0 - probs[c][j]
            terms.append(prod)
        out[y] = math.fsum(terms)
    return out


def brute_force_loglik(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> float:
    """Subject-by-subject log-likelihood."""
    if spec.r > MAX_ENUM_ITEMS:
        raise ValueError(f"enumeration is limited to {MAX_ENUM_ITEMS} items")
    cache: dict[tuple, float] = {}
    terms = []
    profiles, patterns = freq.expand()
    for prof, y in zip(profiles.tolist(), patterns.tolist()):
        key = (tuple(prof), tuple(y))
        if key not in cache:
            total = []
            for c in range(spec.k):
                prod = float(params.pi[c])
                for j, yj in enumerate(y):
                    pj = _p_correct(_scalar_logit(spec, params, c, j, prof))
                    prod *= pj if yj else 1.0 - pj
                total.append(prod)
            cache[key] = math.log(math.fsum(total))
        terms.append(cache[key])
    return math.fsum(terms)


def random_params(spec: ModelSpec, rng: np.random.Generator, *, scale: float = 1.0,
                  dif_scale: float = 0.5) -> ParameterSet:
    """Random parameters satisfying ``spec``'s constraints."""
    k = spec.k
    w = rng.uniform(0.2, 1.0, size=k)
    xi = rng.normal(0.0, 1.5 * scale, size=(k, spec.s))
    beta = np.where(spec.beta_free, rng.normal(0.0, scale, size=spec.r), 0.0)
    gamma = np.where(spec.gamma_free, rng.uniform(0.5, 2.0, size=spec.r), 1.0)
    phi = []
    for q, h in enumerate(spec.n_categories):
        ph = np.zeros((h, spec.r))
        if spec.dif_enabled[q]:
            ph[1:] = rng.normal(0.0, dif_scale, size=(h - 1, spec.r))
        phi.append(ph)
    return ParameterSet(pi=w / w.sum(), xi=xi, beta=beta, gamma=gamma, phi=tuple(phi))


def balanced_groups(n: int, n_categories: Sequence[int]) -> dict[tuple[int, ...], int]:
    """Split ``n`` subjects as evenly as possible over all group profiles."""
    profiles = list(itertools.product(*[range(h) for h in n_categories]))
    base, extra = divmod(n, len(profiles))
    return {p: base + (1 if i < extra else 0) for i, p in enumerate(profiles)}


def default_generator(n: int = 5000, seed: int = 0) -> GeneratorSpec:
    """Unidimensional two-class model on eight items with one binary grouping.

    Half of the items carry uniform DIF against the second group. Classes
    are listed in ascending ability, matching canonical fit output.
    """
    spec = ModelSpec.unidimensional(8, 2, n_categories=(2,))
    phi = np.zeros((2, 8))
    phi[1] = [0.0, 0.5, 0.0, -0.4, 0.0, 0.3, 0.0, -0.5]
    params = ParameterSet(
        pi=np.array([0.45, 0.55]),
        xi=np.array([[-0.8], [0.8]]),
        beta=np.array([0.0, -0.4, 0.3, -0.15, 0.45, -0.6, 0.2, 0.05]),
        gamma=np.array([1.0, 2.0, 2.2, 1.8, 2.4, 1.9, 2.5, 2.1]),
        phi=(phi,),
    )
    return GeneratorSpec(params, spec, balanced_groups(n, spec.n_categories), seed=seed)


def two_trait_generator(n: int = 5000, seed: int = 0, departure: float = 1.0) -> GeneratorSpec:
    """Items 1-4 measure trait A and items 5-8 trait B; three classes, one binary grouping.

    With ``departure = 0`` the three support points are collinear, so the
    two traits are one trait up to a linear map. ``departure`` lifts the
    middle class off that line on trait B.
    """
    spec = ModelSpec.from_groups([[0, 1, 2, 3], [4, 5, 6, 7]], 3, n_categories=(2,))
    phi = np.zeros((2, 8))
    phi[1] = [0.4, 0.0, -0.3, 0.0, 0.0, 0.3, 0.0, -0.4]
    params = ParameterSet(
        pi=np.array([0.3, 0.4, 0.3]),
        xi=np.array([[-1.5, -1.0], [0.0, departure], [1.5, 1.0]]),
        beta=np.array([0.0, -0.5, 0.4, 0.8, 0.0, -0.6, 0.3, 0.7]),
        gamma=np.array([1.0, 1.3, 0.8, 1.2, 1.0, 1.2, 0.9, 1.4]),
        phi=(phi,),
    )
    return GeneratorSpec(params, spec, balanced_groups(n, spec.n_categories), seed=seed)


def dif_generator(n: int = 2000, seed: int = 0, dif: float = 0.0) -> GeneratorSpec:
    """Unidimensional two-class model on six items with one binary grouping.

    ``dif`` is the uniform DIF coefficient of the second group on items
    2, 4 and 6; zero gives DIF-free data.
    """
    spec = ModelSpec.unidimensional(6, 2, n_categories=(2,))
    phi = np.zeros((2, 6))
    phi[1, 1::2] = dif
    params = ParameterSet(
        pi=np.array([0.45, 0.55]),
        xi=np.array([[-1.0], [1.0]]),
        beta=np.array([0.0, -0.4, 0.3, -0.2, 0.5, -0.1]),
        gamma=np.array([1.0, 1.4, 1.2, 1.6, 1.1, 1.3]),
        phi=(phi,),
    )
    return GeneratorSpec(params, spec, balanced_groups(n, spec.n_categories), seed=seed)

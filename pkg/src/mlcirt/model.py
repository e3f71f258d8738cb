"""Model specification, parameter container and free-parameter packing."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class SpecError(ValueError):
    """Raised for an inconsistent model specification."""


@dataclass(frozen=True)
class ModelSpec:
    """Structure of a multidimensional latent class 2PL model with uniform DIF.

    Attributes:
        k: number of latent classes.
        dim_of_item: dimension (0-based) measured by each item.
        n_categories: number of groups per DIF criterion.
        dif_enabled: whether DIF shifts are estimated for each criterion.
        rasch_mode: fix every discrimination at 1.
        reference_item: per dimension, the item whose difficulty is fixed at
            0 and discrimination at 1. Defaults to the first item of each
            dimension.
    """

    k: int
    dim_of_item: tuple[int, ...]
    n_categories: tuple[int, ...] = ()
    dif_enabled: tuple[bool, ...] | None = None
    rasch_mode: bool = False
    reference_item: tuple[int, ...] | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dim_of_item)
        object.__setattr__(self, "dim_of_item", dims)
        object.__setattr__(self, "n_categories", tuple(int(h) for h in self.n_categories))
        if self.k < 1:
            raise SpecError("k must be at least 1")
        if not dims:
            raise SpecError("model needs at least one item")
        s = max(dims) + 1
        if min(dims) < 0 or set(dims) != set(range(s)):
            raise SpecError("dim_of_item must use every dimension 0..s-1 at least once")
        if any(h < 2 for h in self.n_categories):
            raise SpecError("each criterion needs at least 2 categories")
        if self.dif_enabled is None:
            object.__setattr__(self, "dif_enabled", (True,) * len(self.n_categories))
        else:
            object.__setattr__(self, "dif_enabled", tuple(bool(b) for b in self.dif_enabled))
        if len(self.dif_enabled) != len(self.n_categories):
            raise SpecError("dif_enabled needs one flag per criterion")
        if self.reference_item is None:
            refs = tuple(dims.index(d) for d in range(s))
        else:
            refs = tuple(int(j) for j in self.reference_item)
        if len(refs) != s or any(not 0 <= j < len(dims) or dims[j] != d for d, j in enumerate(refs)):
            raise SpecError("reference_item[d] must be an item of dimension d")
        object.__setattr__(self, "reference_item", refs)

    @classmethod
    def per_item(cls, r: int, k: int, **kw) -> "ModelSpec":
        """One dimension per item: the most general model."""
        return cls(k=k, dim_of_item=tuple(range(r)), **kw)

    @classmethod
    def unidimensional(cls, r: int, k: int, **kw) -> "ModelSpec":
        return cls(k=k, dim_of_item=(0,) * r, **kw)

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]], k: int, **kw) -> "ModelSpec":
        r = sum(len(g) for g in groups)
        dims = [-1] * r
        for d, g in enumerate(groups):
            for j in g:
                dims[j] = d
        if -1 in dims:
            raise SpecError("groups must cover every item")
        return cls(k=k, dim_of_item=tuple(dims), **kw)

    @property
    def r(self) -> int:
        return len(self.dim_of_item)

    @property
    def s(self) -> int:
        return max(self.dim_of_item) + 1

    @property
    def n_criteria(self) -> int:
        return len(self.n_categories)

    @property
    def groups(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.s)]
        for j, d in enumerate(self.dim_of_item):
            out[d].append(j)
        return out

    @property
    def dims(self) -> np.ndarray:
        return np.asarray(self.dim_of_item, dtype=np.int64)

    @property
    def beta_free(self) -> np.ndarray:
        mask = np.ones(self.r, dtype=bool)
        mask[list(self.reference_item)] = False
        return mask

    @property
    def gamma_free(self) -> np.ndarray:
        # A single class carries no information on discrimination.
        if self.rasch_mode or self.k == 1:
            return np.zeros(self.r, dtype=bool)
        return self.beta_free

    def with_k(self, k: int) -> "ModelSpec":
        return replace(self, k=k)

    def without_dif(self) -> "ModelSpec":
        return replace(self, dif_enabled=(False,) * self.n_criteria)

    def check_data(self, r: int, n_categories: Sequence[int]):
        if r != self.r:
            raise SpecError(f"model has {self.r} items but data has {r}")
        if tuple(n_categories) != self.n_categories:
            raise SpecError(
                f"model criteria {self.n_categories} do not match data {tuple(n_categories)}"
            )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "dim_of_item": list(self.dim_of_item),
            "n_categories": list(self.n_categories),
            "dif_enabled": list(self.dif_enabled),
            "rasch_mode": self.rasch_mode,
            "reference_item": list(self.reference_item),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            k=d["k"],
            dim_of_item=tuple(d["dim_of_item"]),
            n_categories=tuple(d.get("n_categories", ())),
            dif_enabled=tuple(d["dif_enabled"]) if "dif_enabled" in d else None,
            rasch_mode=d.get("rasch_mode", False),
            reference_item=tuple(d["reference_item"]) if d.get("reference_item") else None,
        )


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """All model parameters.

    Attributes:
        pi: (k,) class weights.
        xi: (k, s) support points.
        beta: (r,) difficulties.
        gamma: (r,) discriminations.
        phi: per criterion, an (h_q, r) array of DIF shifts; row 0 is the
            reference group and stays zero.
    """

    pi: np.ndarray
    xi: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    phi: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        for name in ("pi", "beta", "gamma"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "xi", np.atleast_2d(np.array(self.xi, dtype=float)))
        object.__setattr__(self, "phi", tuple(np.array(p, dtype=float) for p in self.phi))
        for a in (self.pi, self.xi, self.beta, self.gamma, *self.phi):
            a.setflags(write=False)

    @property
    def k(self) -> int:
        return len(self.pi)

    def copy(self, **changes) -> "ParameterSet":
        fields = dict(pi=self.pi, xi=self.xi, beta=self.beta, gamma=self.gamma, phi=self.phi)
        fields.update(changes)
        return ParameterSet(**fields)

    def dif_shift(self, profiles: np.ndarray) -> np.ndarray:
        """Summed DIF shift for each row of ``profiles``; shape (P, r)."""
        profiles = np.asarray(profiles, dtype=np.int64).reshape(len(profiles), -1)
        out = np.zeros((profiles.shape[0], len(self.beta)))
        for q, ph in enumerate(self.phi):
            out += ph[profiles[:, q]]
        return out

    def validate(self, spec: ModelSpec, atol: float = 0.0):
        """Raise :class:`SpecError` unless the parameters satisfy ``spec``'s constraints."""
        if self.xi.shape != (spec.k, spec.s):
            raise SpecError(f"xi has shape {self.xi.shape}, expected {(spec.k, spec.s)}")
        if self.beta.shape != (spec.r,) or self.gamma.shape != (spec.r,):
            raise SpecError("beta and gamma must have one entry per item")
        if (self.pi <= 0).any() or abs(self.pi.sum() - 1.0) > 1e-9:
            raise SpecError("class weights must be positive and sum to 1")
        refs = list(spec.reference_item)
        if np.any(np.abs(self.beta[refs]) > atol) or np.any(np.abs(self.gamma[refs] - 1) > atol):
            raise SpecError("reference items need beta = 0 and gamma = 1")
        if spec.rasch_mode and np.any(np.abs(self.gamma - 1) > atol):
            raise SpecError("rasch mode requires every gamma = 1")
        if len(self.phi) != spec.n_criteria:
            raise SpecError("phi needs one matrix per criterion")
        for q, (ph, h) in enumerate(zip(self.phi, spec.n_categories)):
            if ph.shape != (h, spec.r):
                raise SpecError(f"phi[{q}] has shape {ph.shape}, expected {(h, spec.r)}")
            if np.any(ph[0] != 0):
                raise SpecError("reference-group DIF shifts must be zero")
            if not spec.dif_enabled[q] and np.any(ph != 0):
                raise SpecError(f"DIF is disabled for criterion {q} but phi is nonzero")

    def canonical(self) -> "ParameterSet":
        """Relabel classes so that the first support coordinate is ascending."""
        order = np.lexsort(self.xi.T[::-1])
        return self.copy(pi=self.pi[order], xi=self.xi[order])

    def to_dict(self) -> dict:
        return {
            "pi": self.pi.tolist(),
            "xi": self.xi.tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "phi": [p.tolist() for p in self.phi],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        return cls(
            pi=d["pi"], xi=d["xi"], beta=d["beta"], gamma=d["gamma"],
            phi=tuple(np.array(p, dtype=float) for p in d.get("phi", [])),
        )


def neutral_params(spec: ModelSpec) -> ParameterSet:
    """Uniform weights, zero support points and difficulties, unit discriminations."""
    return ParameterSet(
        pi=np.full(spec.k, 1.0 / spec.k),
        xi=np.zeros((spec.k, spec.s)),
        beta=np.zeros(spec.r),
        gamma=np.ones(spec.r),
        phi=tuple(np.zeros((h, spec.r)) for h in spec.n_categories),
    )


class FreeIndex:
    """Map between a :class:`ParameterSet` and the vector of free parameters.

    Class weights enter through log-ratios against class 1, so the vector is
    unconstrained. Labels use 1-based indices.
    """

    def __init__(self, spec: ModelSpec, criterion_names: Sequence[str] | None = None):
        self.spec = spec
        names = list(criterion_names) if criterion_names else [f"q{q + 1}" for q in range(spec.n_criteria)]
        labels = [f"logit_pi[{c + 1}]" for c in range(1, spec.k)]
        self.n_pi = spec.k - 1
        self.xi_slice = slice(len(labels), len(labels) + spec.k * spec.s)
        labels += [f"xi[{c + 1},{d + 1}]" for c in range(spec.k) for d in range(spec.s)]
        self.beta_items = np.flatnonzero(spec.beta_free)
        labels += [f"beta[{j + 1}]" for j in self.beta_items]
        self.gamma_items = np.flatnonzero(spec.gamma_free)
        labels += [f"gamma[{j + 1}]" for j in self.gamma_items]
        self.phi_blocks = []
        for q, h in enumerate(spec.n_categories):
            if not spec.dif_enabled[q]:
                continue
            start = len(labels)
            labels += [f"phi[{names[q]}][{g + 1},{j + 1}]" for g in range(1, h) for j in range(spec.r)]
            self.phi_blocks.append((q, start, h))
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def position(self, label: str) -> int:
        return self.labels.index(label)

    def xi_position(self, c: int, d: int) -> int:
        return self.xi_slice.start + c * self.spec.s + d

    def phi_position(self, q: int, g: int, j: int) -> int:
        for qq, start, _ in self.phi_blocks:
            if qq == q:
                return start + (g - 1) * self.spec.r + j
        raise KeyError(f"DIF is not estimated for criterion {q}")

    def pack(self, p: ParameterSet) -> np.ndarray:
        parts = [np.log(p.pi[1:]) - np.log(p.pi[0]), p.xi.reshape(-1),
                 p.beta[self.beta_items], p.gamma[self.gamma_items]]
        for q, _, _ in self.phi_blocks:
            parts.append(p.phi[q][1:].reshape(-1))
        return np.concatenate(parts)

    def unpack(self, v: np.ndarray, template: ParameterSet) -> ParameterSet:
        spec = self.spec
        v = np.asarray(v, dtype=float)
        logits = np.concatenate([[0.0], v[: self.n_pi]])
        w = np.exp(logits - logits.max())
        xi = v[self.xi_slice].reshape(spec.k, spec.s)
        pos = self.xi_slice.stop
        beta = template.beta.copy()
        beta[self.beta_items] = v[pos: pos + len(self.beta_items)]
        pos += len(self.beta_items)
        gamma = template.gamma.copy()
        gamma[self.gamma_items] = v[pos: pos + len(self.gamma_items)]
        phi = [ph.copy() for ph in template.phi]
        for q, start, h in self.phi_blocks:
            phi[q][1:] = v[start: start + (h - 1) * spec.r].reshape(h - 1, spec.r)
        return ParameterSet(pi=w / w.sum(), xi=xi, beta=beta, gamma=gamma, phi=tuple(phi))


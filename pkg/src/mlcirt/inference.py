"""Parameter counting, BIC selection, observed information and hypothesis tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaincc

from .data import FrequencyTable
from .em import EmConfig, FitResult, fit, loglik_score
from .model import FreeIndex, ModelSpec, ParameterSet

logger = logging.getLogger(__name__)

# differenced scores carry ~1e-10 relative noise, so exact singularity reads as ~1e9
SINGULAR_CONDITION = 1e8


class NumericalError(RuntimeError):
    """Raised when a numerical quantity cannot be computed."""


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if df <= 0:
        raise ValueError("df must be positive")
    if x <= 0:
        return 1.0
    return float(gammaincc(0.5 * df, 0.5 * x))


@dataclass
class TestResult:
    statistic: float
    df: int
    p_value: float
    kind: str  # "LR" or "Wald"
    hypothesis: str
    flags: list[str] = field(default_factory=list)

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "kind": self.kind,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "flags": list(self.flags),
        }


def n_par(spec: ModelSpec) -> int:
    """Number of free parameters under the identifiability constraints."""
    return len(FreeIndex(spec))


def bic_value(loglik: float, n_par: int, n: int) -> float:
    return -2.0 * loglik + math.log(n) * n_par


def bic(fit_result: FitResult, n: int | None = None) -> float:
    return bic_value(fit_result.loglik, fit_result.n_par, fit_result.n if n is None else n)


def stop_on_bic_increase(ks: Sequence[int], bics: Sequence[float]) -> tuple[int, bool]:
    """Walk ``ks`` in order and stop at the first BIC increase.

    Returns the k preceding the increase and whether the range was exhausted
    without one (in which case the last k is returned).
    """
    if not ks:
        raise ValueError("empty k range")
    for i in range(1, len(ks)):
        if bics[i] > bics[i - 1]:
            return ks[i - 1], False
    return ks[-1], True


@dataclass
class SelectionRow:
    k: int
    loglik: float
    n_par: int
    bic: float
    converged: bool
    condition: float | None = None
    fit: FitResult | None = None

    @property
    def near_singular(self) -> bool:
        return self.condition is not None and not (self.condition < SINGULAR_CONDITION)


@dataclass
class Selection:
    best_k: int
    rows: list[SelectionRow]
    warnings: list[str] = field(default_factory=list)

    def row(self, k: int) -> SelectionRow:
        return next(r for r in self.rows if r.k == k)


def select_k(freq: FrequencyTable, spec_template: ModelSpec, k_range: Sequence[int],
             config: EmConfig | None = None, check_information: bool = False) -> Selection:
    """Fit increasing k until BIC rises, then keep the previous k."""
    ks = list(k_range)
    if not ks or ks != sorted(ks) or len(set(ks)) != len(ks):
        raise ValueError("k_range must be nonempty and strictly ascending")
    rows: list[SelectionRow] = []
    warns: list[str] = []
    for k in ks:
        spec = spec_template.with_k(k)
        res = fit(freq, spec, config)
        if not res.converged:
            warns.append(f"fit at k = {k} did not converge")
        cond = None
        if check_information:
            try:
                cond = observed_information(freq, spec, res.params).condition_estimate
            except NumericalError as exc:
                cond = math.inf
                warns.append(f"information at k = {k}: {exc}")
        row = SelectionRow(k, res.loglik, res.n_par, res.bic, res.converged, cond, res)
        rows.append(row)
        if row.near_singular:
            warns.append(f"information matrix close to singular at k = {k}")
        if len(rows) > 1 and rows[-1].bic > rows[-2].bic:
            break
    best, exhausted = stop_on_bic_increase([r.k for r in rows], [r.bic for r in rows])
    if exhausted:
        warns.append("BIC kept decreasing over the whole k range; the largest k was returned")
    return Selection(best, rows, warns)


@dataclass
class InfoMatrix:
    """Observed information on the free-parameter vector of :class:`FreeIndex`."""

    matrix: np.ndarray
    condition_estimate: float
    index: FreeIndex
    flags: list[str] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        return self.index.labels

    @property
    def near_singular(self) -> bool:
        return not (self.condition_estimate < SINGULAR_CONDITION)

    def covariance(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.matrix)
        except np.linalg.LinAlgError:
            return np.linalg.pinv(self.matrix)

    def standard_errors(self) -> np.ndarray:
        var = np.diag(self.covariance())
        with np.errstate(invalid="ignore"):
            return np.where(var > 0, np.sqrt(np.abs(var)), np.nan)


def observed_information(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet,
                         criterion_names: Sequence[str] | None = None) -> InfoMatrix:
    """Negative Hessian of the log-likelihood at ``params``.

    Columns are central differences of the analytic score with step
    ``max(1e-5, 1e-5 |v_i|)``; the result is symmetrised.
    """
    index = FreeIndex(spec, criterion_names)
    v0 = index.pack(params)
    p = len(v0)
    hess = np.empty((p, p))
    for i in range(p):
        h = max(1e-5, 1e-5 * abs(v0[i]))
        vp, vm = v0.copy(), v0.copy()
        vp[i] += h
        vm[i] -= h
        gp = loglik_score(freq, spec, index.unpack(vp, params), index)
        gm = loglik_score(freq, spec, index.unpack(vm, params), index)
        hess[:, i] = (gp - gm) / (2 * h)
    bad = np.argwhere(~np.isfinite(hess))
    if len(bad):
        a, b = bad[0]
        raise NumericalError(f"non-finite information entry for ({index.labels[a]}, {index.labels[b]})")
    info = -0.5 * (hess + hess.T)
    flags = []
    try:
        cond = float(np.linalg.cond(info))
    except np.linalg.LinAlgError:
        cond = math.inf
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION:
        flags.append("near-singular information matrix")
    if np.linalg.eigvalsh(info)[0] <= 0:
        flags.append("information matrix not positive definite")
    return InfoMatrix(info, cond if np.isfinite(cond) else math.inf, index, flags)


def lr_test(fit_restricted: FitResult, fit_full: FitResult, df: int | None = None,
            hypothesis: str = "") -> TestResult:
    """Likelihood-ratio deviance ``-2 [l(restricted) - l(full)]``."""
    if fit_restricted.n_par >= fit_full.n_par:
        raise ValueError("restricted model must have fewer parameters than the full model")
    if df is None:
        df = fit_full.n_par - fit_restricted.n_par
    flags = []
    d = -2.0 * (fit_restricted.loglik - fit_full.loglik)
    if d < 0:
        flags.append(f"negative deviance {d:.3g} clamped to 0 (restricted fit above full fit)")
        logger.warning(flags[-1])
        d = 0.0
    return TestResult(d, int(df), chi2_sf(d, df), "LR", hypothesis, flags)


@dataclass
class ConstraintFn:
    """A smooth restriction ``f(params) = 0``.

    ``jacobian`` returns the derivative of ``f`` on a :class:`FreeIndex`
    vector; when it is None a central-difference Jacobian is used.
    """

    name: str
    f: Callable[[ParameterSet], np.ndarray]
    jacobian: Callable[[ParameterSet, FreeIndex], np.ndarray] | None = None

    def value(self, params: ParameterSet) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.f(params), dtype=float))

    def jac(self, params: ParameterSet, index: FreeIndex) -> np.ndarray:
        if self.jacobian is not None:
            return np.atleast_2d(self.jacobian(params, index))
        v0 = index.pack(params)
        cols = []
        for i in range(len(v0)):
            h = max(1e-6, 1e-6 * abs(v0[i]))
            vp, vm = v0.copy(), v0.copy()
            vp[i] += h
            vm[i] -= h
            cols.append((self.value(index.unpack(vp, params)) - self.value(index.unpack(vm, params))) / (2 * h))
        return np.stack(cols, axis=1)


def wald_test(fit_full: FitResult | ParameterSet, constraint: ConstraintFn, info: InfoMatrix) -> TestResult:
    """``W = f' (J I^-1 J')^-1 f`` at the unrestricted estimate."""
    params = fit_full.params if isinstance(fit_full, FitResult) else fit_full
    fval = constraint.value(params)
    J = constraint.jac(params, info.index)
    flags = list(info.flags)
    if info.near_singular:
        flags.append("unreliable: information matrix close to singular")
    V = J @ info.covariance() @ J.T
    try:
        w = float(fval @ np.linalg.solve(V, fval))
    except np.linalg.LinAlgError:
        w = float(fval @ np.linalg.pinv(V) @ fval)
        flags.append("singular constraint covariance; pseudo-inverse used")
    if not np.isfinite(w):
        raise NumericalError(f"Wald statistic for {constraint.name} is not finite")
    if w < 0:
        flags.append("negative Wald statistic clamped to 0")
        w = 0.0
    return TestResult(w, len(fval), chi2_sf(w, len(fval)), "Wald", constraint.name, flags)


def unidim_constraint(d1: int, d2: int, k: int) -> ConstraintFn:
    """Collinearity of the support points on dimensions ``d1`` and ``d2`` (0-based).

    With ``u = xi[:, d1]`` and ``v = xi[:, d2]`` the k - 2 components are
    ``(v_c - v_1)(u_2 - u_1) - (u_c - u_1)(v_2 - v_1)`` for classes
    c = 3..k; all vanish exactly when v is an affine function of u.
    """
    if k <= 2:
        raise ValueError("the unidimensionality test needs k > 2: with k <= 2 any two "
                         "support columns are trivially collinear")
    if d1 == d2:
        raise ValueError("d1 and d2 must differ")

    def f(p: ParameterSet) -> np.ndarray:
        u, v = p.xi[:, d1], p.xi[:, d2]
        return (v[2:] - v[0]) * (u[1] - u[0]) - (u[2:] - u[0]) * (v[1] - v[0])

    def jac(p: ParameterSet, index: FreeIndex) -> np.ndarray:
        u, v = p.xi[:, d1], p.xi[:, d2]
        A, B = u[1] - u[0], v[1] - v[0]
        out = np.zeros((k - 2, len(index)))
        for row, c in enumerate(range(2, k)):
            X, Y = u[c] - u[0], v[c] - v[0]
            out[row, index.xi_position(c, d1)] += -B
            out[row, index.xi_position(c, d2)] += A
            out[row, index.xi_position(1, d1)] += Y
            out[row, index.xi_position(1, d2)] += -X
            out[row, index.xi_position(0, d1)] += B - Y
            out[row, index.xi_position(0, d2)] += X - A
        return out

    return ConstraintFn(f"unidimensional(d{d1 + 1}, d{d2 + 1})", f, jac)


def coefficient_constraint(label: str, index: FreeIndex) -> ConstraintFn:
    """``H0: v[label] = 0`` for a single entry of ``index``'s free vector."""
    pos = index.position(label)

    def f(p: ParameterSet) -> np.ndarray:
        return index.pack(p)[pos: pos + 1]

    def jac(p: ParameterSet, idx: FreeIndex) -> np.ndarray:
        out = np.zeros((1, len(idx)))
        out[0, idx.position(label)] = 1.0
        return out

    return ConstraintFn(label, f, jac)


def dif_test_df(spec: ModelSpec) -> int:
    return spec.r * sum(h - 1 for h, on in zip(spec.n_categories, spec.dif_enabled) if on)


def fit_dif_pair(freq: FrequencyTable, spec: ModelSpec, config: EmConfig | None = None
                 ) -> tuple[FitResult, FitResult]:
    """Fit the model with and without DIF; returns (full, restricted)."""
    if not any(spec.dif_enabled):
        raise ValueError("DIF must be enabled for at least one criterion")
    full = fit(freq, spec, config)
    # the restricted fit also starts from the full estimate with DIF removed,
    # which keeps it from stopping at a worse local maximum
    p0 = full.params.copy(phi=tuple(np.zeros_like(ph) for ph in full.params.phi))
    restricted = fit(freq, spec.without_dif(), config, init=[p0])
    return full, restricted


def dif_test(freq: FrequencyTable, spec: ModelSpec, config: EmConfig | None = None) -> TestResult:
    """LR test of no uniform DIF on any item for any enabled criterion."""
    full, restricted = fit_dif_pair(freq, spec, config)
    res = lr_test(restricted, full, df=dif_test_df(spec), hypothesis="no DIF")
    res.flags += [f"full fit: {w}" for w in full.warnings]
    res.flags += [f"restricted fit: {w}" for w in restricted.warnings]
    return res

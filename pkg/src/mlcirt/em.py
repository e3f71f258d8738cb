"""EM estimation with blockwise Newton-Raphson M-steps.

The expected complete log-likelihood only depends on the expected counts
through, for every class ``c`` and group profile ``p``, the number of
subjects ``N[c, p]`` and the number of correct answers ``S[c, p, j]`` to each
item. Given the support points each item is then a small logistic
regression in (beta_j, gamma_j, phi_.j), and given the item parameters each
support point ``xi[c, d]`` is a scalar problem. The M-step alternates the
two blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import expit

from .data import FrequencyTable
from .likelihood import allocate, cell_logits, logsumexp, softplus, table_log_joint
from .model import FreeIndex, ModelSpec, ParameterSet

logger = logging.getLogger(__name__)

PI_FLOOR = 1e-8
DEGENERATE_PATIENCE = 50
MAX_HALVINGS = 30
MAX_STEP = 5.0


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 5000
    tol_loglik: float = 1e-7
    n_starts: int = 5
    seed: int = 0
    newton_max_iters: int = 1
    newton_tol: float = 1e-8
    ridge: float = 1e-8

    def __post_init__(self):
        if not self.tol_loglik > 0:
            raise ValueError("tol_loglik must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def from_dict(cls, d: dict | None) -> "EmConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EM settings: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class FitResult:
    """Outcome of :func:`fit`.

    ``trace`` is the log-likelihood after each E-step of the retained start;
    ``start_logliks`` holds the final value of every start.
    """

    spec: ModelSpec
    params: ParameterSet
    loglik: float
    n_par: int
    n: int
    converged: bool
    iters_used: int
    start_logliks: list[float]
    trace: list[float] = field(default_factory=list)
    allocation: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + math.log(self.n) * self.n_par

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_par

    def to_dict(self, include_allocation: bool = False) -> dict:
        d = {
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "loglik": self.loglik,
            "n_par": self.n_par,
            "n": self.n,
            "bic": self.bic,
            "aic": self.aic,
            "converged": self.converged,
            "iters_used": self.iters_used,
            "start_logliks": list(self.start_logliks),
            "trace": list(self.trace),
            "warnings": list(self.warnings),
        }
        if include_allocation and self.allocation is not None:
            d["allocation"] = self.allocation.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        alloc = d.get("allocation")
        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            params=ParameterSet.from_dict(d["params"]),
            loglik=d["loglik"],
            n_par=d["n_par"],
            n=d["n"],
            converged=d["converged"],
            iters_used=d["iters_used"],
            start_logliks=list(d["start_logliks"]),
            trace=list(d.get("trace", [])),
            allocation=None if alloc is None else np.asarray(alloc),
            warnings=list(d.get("warnings", [])),
        )


def dif_design(spec: ModelSpec, profile_keys: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Dummy matrix (P, L) of non-reference groups of every DIF-enabled criterion."""
    cols, labels = [], []
    for q, h in enumerate(spec.n_categories):
        if not spec.dif_enabled[q]:
            continue
        for g in range(1, h):
            cols.append((profile_keys[:, q] == g).astype(float))
            labels.append((q, g))
    if not cols:
        return np.zeros((len(profile_keys), 0)), labels
    return np.stack(cols, axis=1), labels


@dataclass
class SufficientStats:
    """Expected-count summaries that the complete log-likelihood depends on."""

    class_totals: np.ndarray  # (k,)
    N: np.ndarray  # (k, P)
    S: np.ndarray  # (k, P, r)
    profile_keys: np.ndarray  # (P, Q)

    @property
    def n(self) -> float:
        return float(self.class_totals.sum())


def sufficient_stats(freq: FrequencyTable, expected: np.ndarray) -> SufficientStats:
    """Collapse expected frequencies ``(k, M)`` by class and group profile."""
    onehot = np.zeros((freq.n_entries, len(freq.profile_keys)))
    onehot[np.arange(freq.n_entries), freq.profile_index] = 1.0
    N = expected @ onehot
    y = freq.patterns.astype(float)
    S = (expected[:, None, :] * onehot.T[None, :, :]) @ y
    return SufficientStats(expected.sum(axis=1), N, S, freq.profile_keys)


def e_step(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> tuple[np.ndarray, float]:
    """Expected frequencies ``n~(c, g, y)`` with shape (k, M), and the log-likelihood."""
    a = table_log_joint(freq, spec, params)
    lse = logsumexp(a, axis=0)
    expected = np.exp(a - lse) * freq.counts
    return expected, float(freq.counts @ lse)


def m_step_pi(expected: np.ndarray) -> tuple[np.ndarray, bool]:
    """Closed-form weight update; returns (pi, whether a class hit the floor)."""
    totals = np.asarray(expected, dtype=float)
    if totals.ndim > 1:
        totals = totals.sum(axis=tuple(range(1, totals.ndim)))
    pi = totals / totals.sum()
    degenerate = bool((pi < PI_FLOOR).any())
    if degenerate:
        pi = np.maximum(pi, PI_FLOOR)
        pi /= pi.sum()
    return pi, degenerate


def expected_complete_loglik(stats: SufficientStats, spec: ModelSpec, params: ParameterSet) -> float:
    t = cell_logits(spec, params, stats.profile_keys)
    with np.errstate(divide="ignore", invalid="ignore"):
        wpart = np.where(stats.class_totals > 0, stats.class_totals * np.log(params.pi), 0.0)
    return float(wpart.sum() + (stats.S * t - stats.N[:, :, None] * softplus(t)).sum())


class _ItemBlock:
    """Per-item parameter matrix ``(r, 2 + L)``: beta, gamma, then DIF shifts."""

    def __init__(self, spec: ModelSpec, stats: SufficientStats):
        self.spec = spec
        self.stats = stats
        self.Z, self.labels = dif_design(spec, stats.profile_keys)
        L = self.Z.shape[1]
        self.free = np.zeros((spec.r, 2 + L), dtype=bool)
        self.free[:, 0] = spec.beta_free
        self.free[:, 1] = spec.gamma_free
        self.free[:, 2:] = True

    def get(self, p: ParameterSet) -> np.ndarray:
        cols = [p.beta, p.gamma] + [p.phi[q][g] for q, g in self.labels]
        return np.stack(cols, axis=1)

    def put(self, p: ParameterSet, theta: np.ndarray) -> ParameterSet:
        phi = [ph.copy() for ph in p.phi]
        for l, (q, g) in enumerate(self.labels):
            phi[q][g] = theta[:, 2 + l]
        return p.copy(beta=theta[:, 0], gamma=theta[:, 1], phi=tuple(phi))

    def _u(self, theta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        shift = self.Z @ theta[:, 2:].T  # (P, r)
        loc = theta[:, 0][None, :] + shift
        return xi[:, self.spec.dims][:, None, :] - loc[None, :, :]

    def objective(self, theta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        t = theta[:, 1] * self._u(theta, xi)
        st = self.stats
        return (st.S * t - st.N[:, :, None] * softplus(t)).sum(axis=(0, 1))

    def derivatives(self, theta: np.ndarray, xi: np.ndarray):
        """Gradient (r, A) and Hessian (r, A, A) of the per-item objectives."""
        st = self.stats
        gamma = theta[:, 1]
        u = self._u(theta, xi)
        t = gamma * u
        sig = expit(t)
        e = st.S - st.N[:, :, None] * sig
        w = st.N[:, :, None] * sig * (1.0 - sig)
        k, P, r = t.shape
        A = self.free.shape[1]
        D = np.empty((k, P, r, A))
        D[..., 0] = -gamma
        D[..., 1] = u
        if A > 2:
            D[..., 2:] = -gamma[None, None, :, None] * self.Z[None, :, None, :]
        grad = np.einsum("kpr,kpra->ra", e, D)
        hess = -np.einsum("kpra,kprb->rab", w[..., None] * D, D)
        esum = e.sum(axis=(0, 1))
        hess[:, 0, 1] -= esum
        hess[:, 1, 0] -= esum
        if A > 2:
            ez = np.einsum("kpr,pl->rl", e, self.Z)
            hess[:, 1, 2:] -= ez
            hess[:, 2:, 1] -= ez
        return grad, hess


def _masked_newton(grad, hess, free, ridge):
    """Ascent directions for a batch of small blocks; fixed entries get zero steps.

    The negative Hessian is shifted until positive definite when needed.
    """
    g = np.where(free, grad, 0.0)
    neg = -hess.copy()
    fixed = ~free
    neg[fixed[:, :, None] | fixed[:, None, :]] = 0.0
    diag = np.arange(free.shape[1])
    neg[:, diag, diag] = np.where(fixed, 1.0, neg[:, diag, diag])
    eig = np.linalg.eigvalsh(neg)
    scale = np.maximum(np.abs(eig).max(axis=1), 1.0)
    floor = np.maximum(ridge, 1e-10 * scale)
    shift = np.where(eig[:, 0] < floor, floor - eig[:, 0] + 1e-3 * scale, 0.0)
    neg[:, diag, diag] += shift[:, None]
    step = np.linalg.solve(neg, g[..., None])[..., 0]
    step = np.where(free, step, 0.0)
    norm = np.abs(step).max(axis=1, keepdims=True)
    step = np.where(norm > MAX_STEP, step * (MAX_STEP / np.maximum(norm, 1e-300)), step)
    return step, shift > 0


def _line_search(obj, x0, step, f0):
    """Backtracking by halving, independently per block; returns (x, f, failed mask)."""
    alpha = np.ones(len(f0))
    done = np.zeros(len(f0), dtype=bool)
    x = x0.copy()
    f = f0.copy()
    moving = np.any(step != 0, axis=tuple(range(1, step.ndim)))
    done |= ~moving
    for _ in range(MAX_HALVINGS):
        if done.all():
            break
        trial = x0 + alpha.reshape((-1,) + (1,) * (step.ndim - 1)) * step
        ft = obj(trial)
        ok = ~done & (ft >= f0)
        x[ok] = trial[ok]
        f[ok] = ft[ok]
        done |= ok
        alpha = np.where(done, alpha, alpha * 0.5)
    return x, f, ~done


def _xi_objective(stats, spec, items, theta, xi):
    """Per-(class, dimension) objectives; shape (k, s)."""
    t = theta[:, 1] * items._u(theta, xi)
    per_item = (stats.S * t - stats.N[:, :, None] * softplus(t)).sum(axis=1)  # (k, r)
    out = np.zeros((spec.k, spec.s))
    np.add.at(out.T, spec.dims, per_item.T)
    return out


def _xi_newton(stats, spec, items, theta, xi, ridge):
    gamma = theta[:, 1]
    t = gamma * items._u(theta, xi)
    sig = expit(t)
    e = (stats.S - stats.N[:, :, None] * sig).sum(axis=1) * gamma  # (k, r)
    w = (stats.N[:, :, None] * sig * (1 - sig)).sum(axis=1) * gamma**2
    g = np.zeros((spec.k, spec.s))
    h = np.zeros((spec.k, spec.s))
    np.add.at(g.T, spec.dims, e.T)
    np.add.at(h.T, spec.dims, w.T)
    step = np.clip(g / (h + ridge), -MAX_STEP, MAX_STEP)
    return g, step


@dataclass
class MStepReport:
    ridge_used: bool = False
    line_search_failed: bool = False


def m_step_structural(stats: SufficientStats, spec: ModelSpec, params: ParameterSet,
                      config: EmConfig | None = None, cycles: int = 2,
                      report: MStepReport | None = None) -> ParameterSet:
    """Blockwise Newton-Raphson update of (xi, beta, gamma, phi).

    Each cycle updates all item blocks, then all support points, taking up
    to ``newton_max_iters`` safeguarded Newton steps per block. Steps never
    decrease the block objective, so the expected complete log-likelihood
    is non-decreasing. Constrained entries are never touched.
    """
    config = config or EmConfig()
    report = report if report is not None else MStepReport()
    items = _ItemBlock(spec, stats)
    theta = items.get(params)
    xi = params.xi.copy()
    for _ in range(cycles):
        for _ in range(config.newton_max_iters):
            grad, hess = items.derivatives(theta, xi)
            if np.max(np.abs(np.where(items.free, grad, 0.0)), initial=0.0) < config.newton_tol:
                break
            step, ridged = _masked_newton(grad, hess, items.free, config.ridge)
            report.ridge_used |= bool(ridged.any())
            f0 = items.objective(theta, xi)
            theta, _, failed = _line_search(lambda th: items.objective(th, xi), theta, step, f0)
            report.line_search_failed |= bool(failed.any())
        for _ in range(config.newton_max_iters):
            g, step = _xi_newton(stats, spec, items, theta, xi, config.ridge)
            if np.max(np.abs(g)) < config.newton_tol:
                break
            f0 = _xi_objective(stats, spec, items, theta, xi)
            flat_obj = lambda x: _xi_objective(stats, spec, items, theta, x.reshape(spec.k, spec.s)).reshape(-1)
            xnew, _, failed = _line_search(flat_obj, xi.reshape(-1), step.reshape(-1), f0.reshape(-1))
            xi = xnew.reshape(spec.k, spec.s)
            report.line_search_failed |= bool(failed.any())
    return items.put(params.copy(xi=xi), theta)


def structural_score(stats: SufficientStats, spec: ModelSpec, params: ParameterSet) -> dict:
    """Analytic gradient of the expected complete log-likelihood.

    Returns a dict with ``items`` (r, 2 + L) for (beta, gamma, phi columns),
    ``xi`` (k, s) and ``pi_logit`` (k - 1,).
    """
    items = _ItemBlock(spec, stats)
    theta = items.get(params)
    grad, _ = items.derivatives(theta, params.xi)
    g, _ = _xi_newton(stats, spec, items, theta, params.xi, 0.0)
    pl = stats.class_totals[1:] - stats.n * params.pi[1:]
    return {"items": grad, "xi": g, "pi_logit": pl, "labels": items.labels}


def complete_score_vector(stats: SufficientStats, spec: ModelSpec, params: ParameterSet,
                          index: FreeIndex) -> np.ndarray:
    """Gradient of the expected complete log-likelihood on ``index``'s free vector.

    Evaluated with the stats of the E-step at ``params`` this is the score of
    the incomplete log-likelihood.
    """
    sc = structural_score(stats, spec, params)
    out = np.zeros(len(index))
    out[: index.n_pi] = sc["pi_logit"]
    out[index.xi_slice] = sc["xi"].reshape(-1)
    pos = index.xi_slice.stop
    out[pos: pos + len(index.beta_items)] = sc["items"][index.beta_items, 0]
    pos += len(index.beta_items)
    out[pos: pos + len(index.gamma_items)] = sc["items"][index.gamma_items, 1]
    for l, (q, g) in enumerate(sc["labels"]):
        for j in range(spec.r):
            out[index.phi_position(q, g, j)] = sc["items"][j, 2 + l]
    return out


def loglik_score(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet,
                 index: FreeIndex | None = None) -> np.ndarray:
    index = index or FreeIndex(spec)
    expected, _ = e_step(freq, spec, params)
    return complete_score_vector(sufficient_stats(freq, expected), spec, params, index)


def score_band_weights(freq: FrequencyTable, k: int) -> np.ndarray:
    """Deterministic alpha_c(y): higher total scores lean to higher classes. Shape (k, M)."""
    score = freq.patterns.sum(axis=1).astype(float)
    order = np.argsort(score, kind="stable")
    counts = freq.counts[order].astype(float)
    # mid-rank of each distinct score among all subjects
    rank = np.empty(freq.n_entries)
    rank[order] = (np.cumsum(counts) - 0.5 * counts) / counts.sum()
    for val in np.unique(score):
        sel = score == val
        rank[sel] = np.average(rank[sel], weights=freq.counts[sel])
    centers = (np.arange(k) + 0.5) / k
    alpha = np.exp(-0.5 * ((rank[None, :] - centers[:, None]) * k / 0.6) ** 2) + 1e-3
    return alpha / alpha.sum(axis=0)


def initial_weights(freq: FrequencyTable, k: int, start_index: int, seed: int) -> np.ndarray:
    """alpha_c(y) for a start; start 1 is the deterministic score-band split."""
    alpha = score_band_weights(freq, k)
    if start_index > 1:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, start_index])))
        scores = freq.patterns.sum(axis=1)
        r = freq.n_items
        # perturb per total score, then mildly per pattern
        band_noise = rng.normal(0.0, 1.0, size=(k, r + 1))
        alpha = alpha * np.exp(band_noise[:, scores] + rng.normal(0.0, 0.3, size=alpha.shape))
        alpha /= alpha.sum(axis=0)
    return alpha


def _starting_structure(stats: SufficientStats, spec: ModelSpec, pi: np.ndarray) -> ParameterSet:
    """Crude item and support values from class-wise proportions correct."""
    N = stats.N.sum(axis=1)  # (k,)
    S = stats.S.sum(axis=1)  # (k, r)
    lg = np.log((S + 0.5) / (N[:, None] - S + 0.5))
    xi = lg[:, list(spec.reference_item)]
    xi_item = xi[:, spec.dims]
    w = pi[:, None]
    beta = np.where(spec.beta_free, (w * (xi_item - lg)).sum(axis=0) / w.sum(), 0.0)
    return ParameterSet(
        pi=pi, xi=xi, beta=beta, gamma=np.ones(spec.r),
        phi=tuple(np.zeros((h, spec.r)) for h in spec.n_categories),
    )


def initialize(freq: FrequencyTable, spec: ModelSpec, start_index: int = 1, seed: int = 0,
               config: EmConfig | None = None) -> ParameterSet:
    """Initial parameters from expected counts ``n(g, y) alpha_c(y)`` followed by an M-step."""
    config = config or EmConfig()
    expected = initial_weights(freq, spec.k, start_index, seed) * freq.counts
    pi, _ = m_step_pi(expected)
    stats = sufficient_stats(freq, expected)
    params = _starting_structure(stats, spec, pi)
    return m_step_structural(stats, spec, params, replace(config, newton_max_iters=3), cycles=10)


@dataclass
class _Run:
    params: ParameterSet
    loglik: float
    converged: bool
    iters: int
    trace: list[float]
    warnings: list[str]


def run_em(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet, config: EmConfig) -> _Run:
    """EM iterations from ``params`` until the log-likelihood gain drops below tolerance."""
    trace: list[float] = []
    warnings: list[str] = []
    report = MStepReport()
    pinned = 0
    degenerate = False
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        expected, ll = e_step(freq, spec, params)
        trace.append(ll)
        if not np.isfinite(ll):
            warnings.append("non-finite log-likelihood")
            break
        if len(trace) > 1:
            gain = trace[-1] - trace[-2]
            if gain < -1e-8:
                warnings.append(f"log-likelihood decreased by {-gain:.3g} at iteration {it}")
            if gain < config.tol_loglik:
                converged = True
                break
        pi, floored = m_step_pi(expected)
        pinned = pinned + 1 if floored else 0
        if pinned >= DEGENERATE_PATIENCE:
            degenerate = True
        stats = sufficient_stats(freq, expected)
        params = m_step_structural(stats, spec, params.copy(pi=pi), config, report=report)
    else:
        # iteration cap reached: report the log-likelihood of the returned params
        trace.append(e_step(freq, spec, params)[1])
    if degenerate:
        warnings.append("degenerate class: weight pinned at the floor")
    if report.line_search_failed:
        warnings.append("Newton line search exhausted for some block")
    return _Run(params, trace[-1], converged, it, trace, warnings)


def fit(freq: FrequencyTable, spec: ModelSpec, config: EmConfig | None = None,
        init: list[ParameterSet] | None = None, n_par: int | None = None,
        cold_starts: int | None = None) -> FitResult:
    """Maximum likelihood fit; the best of all starts is returned.

    Args:
        freq: aggregated data.
        spec: model structure, checked against the data.
        config: EM settings.
        init: extra starting values tried before the score-band starts.
        n_par: override for the free-parameter count; by default it is
            counted from ``spec``.
        cold_starts: number of generated starts after ``init``; defaults to
            ``config.n_starts``. Zero is allowed when ``init`` is given.
    """
    from .inference import n_par as count_par

    config = config or EmConfig()
    spec.check_data(freq.n_items, freq.n_categories)
    warns: list[str] = []
    n_patterns = len({tuple(p) for p in freq.patterns.tolist()})
    if spec.k > n_patterns:
        warns.append(f"k = {spec.k} exceeds the {n_patterns} distinct observed patterns")
    starts = list(init or [])
    n_cold = config.n_starts if cold_starts is None else int(cold_starts)
    if n_cold < 0 or n_cold + len(starts) == 0:
        raise ValueError("fit needs at least one start")
    best: _Run | None = None
    start_ll = []
    for i in range(len(starts) + n_cold):
        p0 = starts[i] if i < len(starts) else initialize(freq, spec, i - len(starts) + 1, config.seed, config)
        run = run_em(freq, spec, p0, config)
        start_ll.append(run.loglik)
        logger.debug("start %d: loglik %.6f after %d iterations", i + 1, run.loglik, run.iters)
        if best is None or run.loglik > best.loglik:
            best = run
    assert best is not None
    if not best.converged:
        warns.append("EM did not converge within max_iters")
    warns += best.warnings
    params = best.params.canonical()
    neg = np.flatnonzero(params.gamma < 0)
    if len(neg):
        warns.append("negative discrimination for items " + ", ".join(str(j + 1) for j in neg))
    return FitResult(
        spec=spec,
        params=params,
        loglik=best.loglik,
        n_par=count_par(spec) if n_par is None else n_par,
        n=freq.n_subjects,
        converged=best.converged,
        iters_used=best.iters,
        start_logliks=start_ll,
        trace=best.trace,
        allocation=allocate(freq, spec, params),
        warnings=warns,
    )

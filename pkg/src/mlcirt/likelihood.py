"""Response probabilities, manifest distribution and log-likelihood.

Everything is accumulated on the log scale. For a logit ``t`` the Bernoulli
log-probabilities are ``-softplus(-t)`` and ``-softplus(t)``, so the log
probability of a pattern given a class is ``y . t - sum(softplus(t))``.
"""

from __future__ import annotations

import numpy as np

from .data import FrequencyTable
from .model import ModelSpec, ParameterSet


def softplus(x):
    return np.logaddexp(0.0, x)


def logsumexp(a, axis=None, b=None):
    """log(sum(b * exp(a))) along ``axis``; all-(-inf) slices give -inf."""
    a = np.asarray(a, dtype=float)
    if b is not None:
        with np.errstate(divide="ignore"):
            a = a + np.log(b)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.squeeze(axis=axis) if axis is not None else out.reshape(())[()]


def cell_logits(spec: ModelSpec, params: ParameterSet, profiles: np.ndarray) -> np.ndarray:
    """Logits for every (class, group profile, item); shape (k, P, r)."""
    theta = params.xi[:, spec.dims]  # (k, r)
    location = params.beta[None, :] + params.dif_shift(profiles)  # (P, r)
    return params.gamma * (theta[:, None, :] - location[None, :, :])


def item_logit(j: int, group_profile, theta, spec: ModelSpec, params: ParameterSet) -> float:
    """Logit of a correct answer to item ``j`` at ability vector ``theta``."""
    theta = np.asarray(theta, dtype=float).reshape(-1)
    shift = params.dif_shift(np.asarray(group_profile, dtype=np.int64).reshape(1, -1))[0, j]
    return float(params.gamma[j] * (theta[spec.dim_of_item[j]] - params.beta[j] - shift))


def _profile_row(group_profile) -> np.ndarray:
    return np.asarray(group_profile, dtype=np.int64).reshape(1, -1)


def log_class_conditional(pattern, group_profile, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """log p(y | c, g) for every class; shape (k,)."""
    t = cell_logits(spec, params, _profile_row(group_profile))[:, 0, :]
    y = np.asarray(pattern, dtype=float)
    return t @ y - softplus(t).sum(axis=1)


def class_conditional(pattern, group_profile, c: int, spec: ModelSpec, params: ParameterSet) -> float:
    """p(y | class c, group profile); ``c`` is 0-based."""
    return float(np.exp(log_class_conditional(pattern, group_profile, spec, params)[c]))


def manifest(pattern, group_profile, spec: ModelSpec, params: ParameterSet) -> float:
    lc = log_class_conditional(pattern, group_profile, spec, params)
    return float(np.exp(logsumexp(lc, b=params.pi)))


def posterior(pattern, group_profile, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """Posterior class probabilities for one subject."""
    a = log_class_conditional(pattern, group_profile, spec, params) + np.log(params.pi)
    return np.exp(a - logsumexp(a))


def table_log_conditional(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """log p(y_m | c, g_m) for every table entry; shape (k, M)."""
    t = cell_logits(spec, params, freq.profile_keys)  # (k, P, r)
    sp = softplus(t).sum(axis=2)  # (k, P)
    idx = freq.profile_index
    y = freq.patterns.astype(float)
    lin = np.einsum("kmr,mr->km", t[:, idx, :], y)
    return lin - sp[:, idx]


def table_log_joint(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """log[p(y_m | c, g_m) pi_c]; shape (k, M)."""
    with np.errstate(divide="ignore"):
        return table_log_conditional(freq, spec, params) + np.log(params.pi)[:, None]


def log_manifest_table(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    return logsumexp(table_log_joint(freq, spec, params), axis=0)


def log_likelihood(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> float:
    """Incomplete-data log-likelihood from the aggregated frequencies."""
    return float(freq.counts @ log_manifest_table(freq, spec, params))


def posterior_table(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> np.ndarray:
    """Posterior class probabilities per table entry; shape (k, M)."""
    a = table_log_joint(freq, spec, params)
    return np.exp(a - logsumexp(a, axis=0))


def allocate(freq: FrequencyTable, spec: ModelSpec, params: ParameterSet) -> np.ndarray | None:
    """Hard class labels (0-based, highest posterior) per subject."""
    if freq.subject_entry is None:
        return None
    best = posterior_table(freq, spec, params).argmax(axis=0)
    return best[freq.subject_entry]

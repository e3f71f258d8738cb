"""Hierarchical clustering of items into unidimensional groups.

Starting from one dimension per item, every step computes the Wald
statistic for collapsing each pair of current groups into one dimension,
merges the pair with the smallest statistic and refits. The dendrogram is
cut before the first step whose BIC exceeds that of the initial model.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FrequencyTable, default_item_names
from .em import EmConfig, FitResult, fit
from .inference import NumericalError, observed_information, unidim_constraint, wald_test
from .model import ModelSpec, ParameterSet

logger = logging.getLogger(__name__)

FORMATS = ("json", "newick", "tsv")


@dataclass
class MergeStep:
    merged_groups: tuple[int, int]
    wald_statistic: float
    wald_pvalue: float
    fit_after: FitResult
    deviance_vs_initial: float
    bic_increase_vs_initial: float
    bic_increase_vs_previous: float
    groups_after: dict[int, tuple[int, ...]]
    flags: list[str] = field(default_factory=list)

    @property
    def s(self) -> int:
        return len(self.groups_after)

    def to_dict(self) -> dict:
        return {
            "merged_groups": list(self.merged_groups),
            "wald_statistic": self.wald_statistic,
            "wald_pvalue": self.wald_pvalue,
            "deviance_vs_initial": self.deviance_vs_initial,
            "bic_increase_vs_initial": self.bic_increase_vs_initial,
            "bic_increase_vs_previous": self.bic_increase_vs_previous,
            "groups_after": [[gid, list(items)] for gid, items in self.groups_after.items()],
            "flags": list(self.flags),
            "fit_after": self.fit_after.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeStep":
        return cls(
            merged_groups=tuple(d["merged_groups"]),
            wald_statistic=d["wald_statistic"],
            wald_pvalue=d["wald_pvalue"],
            fit_after=FitResult.from_dict(d["fit_after"]),
            deviance_vs_initial=d["deviance_vs_initial"],
            bic_increase_vs_initial=d["bic_increase_vs_initial"],
            bic_increase_vs_previous=d["bic_increase_vs_previous"],
            groups_after={gid: tuple(items) for gid, items in d["groups_after"]},
            flags=list(d.get("flags", [])),
        )


@dataclass
class Dendrogram:
    """Merge history. Group ids 0..r-1 are single items; merged groups get r, r+1, ..."""

    steps: list[MergeStep]
    initial_fit: FitResult
    item_names: tuple[str, ...]
    cut_step: int | None = None
    final_partition: list[tuple[int, ...]] | None = None
    error: str | None = None

    @property
    def r(self) -> int:
        return len(self.item_names)

    @property
    def complete(self) -> bool:
        return self.error is None and len(self.steps) == self.r - 1

    def group_items(self) -> dict[int, tuple[int, ...]]:
        out = {j: (j,) for j in range(self.r)}
        for st in self.steps:
            out.update(st.groups_after)
        return out

    def partition_at(self, step: int) -> list[tuple[int, ...]]:
        if step == 0:
            return [(j,) for j in range(self.r)]
        return sorted(self.steps[step - 1].groups_after.values())

    def to_dict(self) -> dict:
        return {
            "item_names": list(self.item_names),
            "initial_fit": self.initial_fit.to_dict(),
            "steps": [s.to_dict() for s in self.steps],
            "cut_step": self.cut_step,
            "final_partition": None if self.final_partition is None
            else [list(g) for g in self.final_partition],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dendrogram":
        fp = d.get("final_partition")
        return cls(
            steps=[MergeStep.from_dict(s) for s in d["steps"]],
            initial_fit=FitResult.from_dict(d["initial_fit"]),
            item_names=tuple(d["item_names"]),
            cut_step=d.get("cut_step"),
            final_partition=None if fp is None else [tuple(g) for g in fp],
            error=d.get("error"),
        )


def _spec_for(groups: dict[int, tuple[int, ...]], active: list[int], refs: dict[int, int],
              k: int, base: ModelSpec) -> ModelSpec:
    dims = [0] * base.r
    for d, gid in enumerate(active):
        for j in groups[gid]:
            dims[j] = d
    return replace(base, k=k, dim_of_item=tuple(dims), reference_item=tuple(refs[g] for g in active))


def merged_start(params: ParameterSet, old: ModelSpec, new: ModelSpec, da: int, db: int,
                 new_dim: int, old_dims_to_new: dict[int, int]) -> ParameterSet:
    """Warm start for the model where dimension ``db`` is folded into ``da``.

    The support column of ``db`` is regressed (pi-weighted) on that of
    ``da``; items of ``db`` are rescaled so their logits are unchanged when
    ``xi[:, db]`` equals its fitted line. When the slope is degenerate the
    two columns are averaged instead.
    """
    u, v, w = params.xi[:, da], params.xi[:, db], params.pi
    mu, mv = w @ u, w @ v
    var = w @ (u - mu) ** 2
    slope = (w @ ((u - mu) * (v - mv)) / var) if var > 1e-12 else 0.0
    xi = np.zeros((new.k, new.s))
    for d_old, d_new in old_dims_to_new.items():
        xi[:, d_new] = params.xi[:, d_old]
    beta, gamma = params.beta.copy(), params.gamma.copy()
    phi = [ph.copy() for ph in params.phi]
    items_b = [j for j, d in enumerate(old.dim_of_item) if d == db]
    if abs(slope) > 1e-3:
        icept = mv - slope * mu
        xi[:, new_dim] = u
        for j in items_b:
            beta[j] = (beta[j] - icept) / slope
            gamma[j] = gamma[j] * slope
            for ph in phi:
                ph[:, j] /= slope
    else:
        xi[:, new_dim] = 0.5 * (u + v)
    if new.rasch_mode:
        gamma[:] = 1.0
    return ParameterSet(pi=params.pi, xi=xi, beta=beta, gamma=gamma, phi=tuple(phi))


def pairwise_wald(fit_result: FitResult, info, active: list[int]) -> list[tuple[tuple[int, int], float, float, list[str]]]:
    """Wald statistics for collapsing every pair of current dimensions."""
    k = fit_result.spec.k
    out = []
    for a in range(len(active)):
        for b in range(a + 1, len(active)):
            t = wald_test(fit_result, unidim_constraint(a, b, k), info)
            out.append(((active[a], active[b]), t.statistic, t.p_value, t.flags))
    return out


def cluster(freq: FrequencyTable, k: int, n_categories: Sequence[int] | None = None,
            config: EmConfig | None = None, *, dif_enabled: Sequence[bool] | None = None,
            item_names: Sequence[str] | None = None, cold_starts: int = 1,
            initial_fit: FitResult | None = None) -> Dendrogram:
    """Build the full dendrogram from the per-item model down to one dimension.

    Args:
        freq: aggregated data.
        k: number of latent classes (must exceed 2).
        n_categories: categories per DIF criterion; defaults to the table's.
        config: EM settings for the initial fit.
        dif_enabled: per-criterion DIF flags (default: all on).
        item_names: labels used in exports.
        cold_starts: score-band starts tried at each refit besides the warm start.
        initial_fit: reuse an existing fit of the per-item model.
    """
    if k <= 2:
        raise ValueError("clustering needs k > 2: the unidimensionality Wald test has k - 2 df")
    r = freq.n_items
    if r < 2:
        raise ValueError("clustering needs at least 2 items")
    if cold_starts < 0:
        raise ValueError("cold_starts must be non-negative")
    config = config or EmConfig()
    n_categories = tuple(freq.n_categories if n_categories is None else n_categories)
    base = ModelSpec.per_item(r, k, n_categories=n_categories,
                              dif_enabled=None if dif_enabled is None else tuple(dif_enabled))
    names = tuple(item_names) if item_names else default_item_names(r)
    groups = {j: (j,) for j in range(r)}
    refs = {j: j for j in range(r)}
    active = list(range(r))
    current = initial_fit if initial_fit is not None else fit(freq, base, config)
    initial = current
    dendro = Dendrogram([], initial, names)
    next_id = r
    while len(active) > 1:
        spec = current.spec
        try:
            info = observed_information(freq, spec, current.params)
            pairs = pairwise_wald(current, info, active)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            dendro.error = f"step {len(dendro.steps) + 1}: {exc}"
            break
        # strict < keeps the lexicographically smallest pair among ties
        best = pairs[0]
        for cand in pairs[1:]:
            if cand[1] < best[1]:
                best = cand
        (ga, gb), w, pval, wflags = best
        da, db = active.index(ga), active.index(gb)
        groups[next_id] = tuple(sorted(groups[ga] + groups[gb]))
        refs[next_id] = refs[ga]
        new_active = [g for g in active if g not in (ga, gb)] + [next_id]
        new_spec = _spec_for(groups, new_active, refs, k, base)
        mapping = {active.index(g): new_active.index(g) for g in active if g not in (ga, gb)}
        start = merged_start(current.params, spec, new_spec, da, db, len(new_active) - 1, mapping)
        try:
            after = fit(freq, new_spec, config, init=[start], cold_starts=cold_starts)
        except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
            dendro.error = f"refit failed at step {len(dendro.steps) + 1}: {exc}"
            break
        flags = sorted(set(wflags))
        dev = -2.0 * (after.loglik - initial.loglik)
        if dendro.steps and dev < dendro.steps[-1].deviance_vs_initial - 1e-4:
            flags.append("deviance decreased versus previous step (local maximum)")
        dendro.steps.append(MergeStep(
            merged_groups=(ga, gb),
            wald_statistic=w,
            wald_pvalue=pval,
            fit_after=after,
            deviance_vs_initial=dev,
            bic_increase_vs_initial=after.bic - initial.bic,
            bic_increase_vs_previous=after.bic - current.bic,
            groups_after={g: groups[g] for g in new_active},
            flags=flags,
        ))
        logger.info("step %d: merged %s and %s (W = %.3f), deviance %.3f",
                    len(dendro.steps), ga, gb, w, dev)
        active = new_active
        current = after
        next_id += 1
    dendro.cut_step, dendro.final_partition = cut(dendro)
    return dendro


def cut_index(bic_increases: Sequence[float]) -> int:
    """Number of merge steps kept: those before the first positive BIC increase."""
    for i, inc in enumerate(bic_increases):
        if inc > 0:
            return i
    return len(bic_increases)


def cut(dendrogram: Dendrogram) -> tuple[int, list[tuple[int, ...]]]:
    """Cut before the first step whose BIC exceeds the initial model's."""
    step = cut_index([s.bic_increase_vs_initial for s in dendrogram.steps])
    return step, dendrogram.partition_at(step)


def _fmt(x: float) -> str:
    return format(x, ".6f")


def to_newick(d: Dendrogram) -> str:
    label = {j: name for j, name in enumerate(d.item_names)}
    next_id = d.r
    for st in d.steps:
        a, b = st.merged_groups
        label[next_id] = f"({label.pop(a)},{label.pop(b)}):{_fmt(st.deviance_vs_initial)}"
        next_id += 1
    return "(" + ",".join(label[g] for g in sorted(label)) + ");"


def to_tsv(d: Dendrogram) -> str:
    items = d.group_items()

    def name(gid):
        return "+".join(d.item_names[j] for j in items[gid])

    lines = ["\t".join(["step", "s", "merged", "wald_statistic", "wald_pvalue",
                        "deviance_vs_initial", "bic_increase_vs_initial",
                        "bic_increase_vs_previous"])]
    for t, st in enumerate(d.steps, start=1):
        a, b = st.merged_groups
        lines.append("\t".join([
            str(t), str(st.s), f"{name(a)}|{name(b)}", _fmt(st.wald_statistic),
            format(st.wald_pvalue, ".6g"), _fmt(st.deviance_vs_initial),
            _fmt(st.bic_increase_vs_initial), _fmt(st.bic_increase_vs_previous),
        ]))
    return "\n".join(lines) + "\n"


def to_json(d: Dendrogram) -> str:
    return json.dumps(d.to_dict(), indent=2)


def from_json(text: str) -> Dendrogram:
    return Dendrogram.from_dict(json.loads(text))


def export_dendrogram(dendrogram: Dendrogram, fmt: str, path=None) -> str:
    """Render ``dendrogram`` as json, newick or tsv; write to ``path`` if given."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown dendrogram format {fmt!r}; expected one of {FORMATS}")
    text = {"json": to_json, "newick": to_newick, "tsv": to_tsv}[fmt](dendrogram)
    if fmt == "newick":
        text += "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text

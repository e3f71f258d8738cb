"""Batch front end: ``mlcirt <command> --config run.json``.

Commands write their artifacts only after every computation has finished,
so a run that fails validation leaves the output directory untouched.
Exit status is 0 on success, 2 on invalid input or configuration and 3 on
numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import FORMATS, cluster, export_dendrogram
from .data import (
    DataError,
    ResponseDataset,
    Schema,
    aggregate,
    dataset_csv,
    dataset_schema,
    ingest_csv,
)
from .em import EmConfig, FitResult, fit
from .inference import (
    NumericalError,
    bic_value,
    fit_dif_pair,
    dif_test_df,
    lr_test,
    observed_information,
    select_k,
    stop_on_bic_increase,
)
from .model import ModelSpec, ParameterSet, SpecError
from .synthetic import GeneratorSpec, default_generator, simulate

logger = logging.getLogger("mlcirt")

COMMANDS = ("fit", "select-k", "test-dif", "cluster", "simulate")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

# fit and test-dif default to one trait; select-k and cluster start per item
DEFAULT_DIMS = {"fit": "unidimensional", "test-dif": "unidimensional",
                "select-k": "per-item", "cluster": "per-item", "simulate": None}
DEFAULT_K = {"fit": 2, "test-dif": 2, "cluster": 3}

DEFAULTS = {
    "data": None,
    "schema": None,
    "out": ".",
    "drop_incomplete": False,
    "dichotomize_threshold": None,
    "model": {"k": None, "k_range": [1, 2, 3, 4, 5, 6], "dim_of_item": None,
              "dif_criteria": None, "rasch_mode": False},
    "em": EmConfig().to_dict(),
    "formats": list(FORMATS),
    "check_information": False,
    "cold_starts": 1,
    "replay": None,
    "simulate": {"n": 5000, "seed": 0},
}


class ConfigError(ValueError):
    """Invalid run configuration."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key not in ("replay",):
            if key != "em":
                unknown = set(val) - set(base[key]) - ({"truth"} if key == "simulate" else set())
                if unknown:
                    raise ConfigError(f"unknown {key} keys: {', '.join(sorted(unknown))}")
            out[key] = {**base[key], **val}
        else:
            out[key] = copy.deepcopy(val)
    return out


def effective_config(command: str, config: dict, overrides: dict) -> dict:
    """Defaults, then the config file, then command-line flags."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    cfg = _merge(DEFAULTS, {k: v for k, v in config.items() if k != "command"})
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    model = cfg["model"]
    if model["dim_of_item"] is None:
        model["dim_of_item"] = DEFAULT_DIMS[command]
    if model["k"] is None:
        model["k"] = DEFAULT_K.get(command)
    ks = model["k_range"]
    if not ks or any(not isinstance(k, int) or k < 1 for k in ks) or list(ks) != sorted(set(ks)):
        raise ConfigError("model.k_range must be a nonempty ascending list of positive integers")
    for fmt in cfg["formats"]:
        if fmt not in FORMATS:
            raise ConfigError(f"unknown output format {fmt!r}; expected one of {FORMATS}")
    cfg["em"] = EmConfig.from_dict(cfg["em"]).to_dict()
    return {"command": command, **cfg}


def _num(x: float) -> str:
    return format(float(x), ".10g")


def _json(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _provenance(cfg: dict) -> dict:
    return {"tool_version": __version__, "config": cfg}


def _stars(p: float) -> str:
    if not p < 0.05:
        return ""
    return "***" if p < 0.001 else "**" if p < 0.01 else "*"


def _load_data(cfg: dict) -> ResponseDataset:
    if not cfg["schema"]:
        raise ConfigError("a schema file is required (--schema)")
    if not cfg["data"]:
        raise ConfigError("a data file is required (--data)")
    schema = Schema.load(cfg["schema"])
    if not Path(cfg["data"]).is_file():
        raise DataError(f"data file not found: {cfg['data']}")
    return ingest_csv(cfg["data"], schema, drop_incomplete=cfg["drop_incomplete"],
                      dichotomize_threshold=cfg["dichotomize_threshold"])


def build_spec(model: dict, data: ResponseDataset, k: int) -> ModelSpec:
    """Model structure from the config's model block.

    ``dim_of_item`` is "per-item", "unidimensional" or a list of 1-based
    dimension labels, one per item. ``dif_criteria`` names the criteria
    with DIF; null enables all of them.
    """
    r = data.n_items
    dims = model["dim_of_item"]
    if dims == "per-item":
        dim_of_item = tuple(range(r))
    elif dims == "unidimensional":
        dim_of_item = (0,) * r
    elif isinstance(dims, list):
        if len(dims) != r or any(not isinstance(d, int) or d < 1 for d in dims):
            raise ConfigError(f"model.dim_of_item needs {r} positive integer labels")
        dim_of_item = tuple(d - 1 for d in dims)
    else:
        raise ConfigError("model.dim_of_item must be 'per-item', 'unidimensional' or a list")
    names = [c.name for c in data.criteria]
    chosen = model["dif_criteria"]
    if chosen is None:
        enabled = (True,) * len(names)
    else:
        unknown = set(chosen) - set(names)
        if unknown:
            raise ConfigError(f"unknown DIF criteria: {', '.join(sorted(unknown))}")
        enabled = tuple(n in chosen for n in names)
    if not isinstance(k, int) or k < 1:
        raise ConfigError("model.k must be a positive integer")
    return ModelSpec(k, dim_of_item, n_categories=data.n_categories, dif_enabled=enabled,
                     rasch_mode=bool(model["rasch_mode"]))


def _checked(res: FitResult) -> FitResult:
    if not math.isfinite(res.loglik):
        raise NumericalError("the fitted log-likelihood is not finite")
    return res


def _fit_record(res: FitResult, data: ResponseDataset) -> dict:
    return {
        "item_names": list(data.item_names),
        "criteria": [{"name": c.name, "categories": list(c.categories)} for c in data.criteria],
        "fit": res.to_dict(),
    }


def support_points_csv(res: FitResult, item_names) -> str:
    """One row per dimension with its support point in every class, then the weights."""
    k = res.spec.k
    rows = []
    for d, items in enumerate(res.spec.groups):
        rows.append([str(d + 1), " ".join(item_names[j] for j in items)]
                    + [_num(x) for x in res.params.xi[:, d]])
    rows.append(["weight", ""] + [_num(x) for x in res.params.pi])
    return _csv(["dimension", "items"] + [f"class_{c + 1}" for c in range(k)], rows)


def _summary(res: FitResult) -> dict:
    return {"loglik": res.loglik, "n_par": res.n_par, "bic": res.bic,
            "converged": res.converged, "warnings": list(res.warnings)}


def cmd_fit(cfg: dict) -> dict[str, str]:
    data = _load_data(cfg)
    spec = build_spec(cfg["model"], data, cfg["model"]["k"])
    res = _checked(fit(aggregate(data), spec, EmConfig.from_dict(cfg["em"])))
    for w in res.warnings:
        logger.warning(w)
    print(f"loglik = {res.loglik:.6f}, #par = {res.n_par}, BIC = {res.bic:.3f}")
    return {
        "fit.json": _json({**_provenance(cfg), **_fit_record(res, data)}),
        "support_points.csv": support_points_csv(res, data.item_names),
    }


def _replay_rows(replay: dict) -> tuple[list[list], list[int], list[float]]:
    try:
        n = int(replay["n"])
        entries = [(int(e["k"]), float(e["loglik"]), int(e["n_par"])) for e in replay["rows"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"replay needs 'n' and rows with k, loglik and n_par: {exc}") from None
    if n < 1 or not entries:
        raise ConfigError("replay needs a positive n and at least one row")
    ks = [e[0] for e in entries]
    if ks != sorted(set(ks)):
        raise ConfigError("replay rows must have strictly ascending k")
    bics = [bic_value(ll, p, n) for _, ll, p in entries]
    rows = [[str(k), _num(ll), str(p), _num(b)] for (k, ll, p), b in zip(entries, bics)]
    return rows, ks, bics


def cmd_select_k(cfg: dict) -> dict[str, str]:
    warnings: list[str] = []
    if cfg["replay"] is not None:
        rows, ks, bics = _replay_rows(cfg["replay"])
        best, exhausted = stop_on_bic_increase(ks, bics)
        if exhausted:
            warnings.append("BIC kept decreasing over the whole k range; the largest k was returned")
        detail = [{"k": k, "bic": b} for k, b in zip(ks, bics)]
    else:
        data = _load_data(cfg)
        spec = build_spec(cfg["model"], data, cfg["model"]["k_range"][0])
        sel = select_k(aggregate(data), spec, cfg["model"]["k_range"], EmConfig.from_dict(cfg["em"]),
                       check_information=cfg["check_information"])
        for row in sel.rows:
            _checked(row.fit)
        best, warnings = sel.best_k, list(sel.warnings)
        rows = [[str(r.k), _num(r.loglik), str(r.n_par), _num(r.bic)] for r in sel.rows]
        detail = [{"k": r.k, "loglik": r.loglik, "n_par": r.n_par, "bic": r.bic,
                   "converged": r.converged, "condition_estimate": r.condition}
                  for r in sel.rows]
    for w in warnings:
        logger.warning(w)
    print(f"best k = {best}")
    return {
        "selection.csv": _csv(["k", "loglik", "n_par", "BIC"], rows),
        "selection.json": _json({**_provenance(cfg), "best_k": best, "rows": detail,
                                 "warnings": warnings}),
    }


def cmd_test_dif(cfg: dict) -> dict[str, str]:
    data = _load_data(cfg)
    spec = build_spec(cfg["model"], data, cfg["model"]["k"])
    if not any(spec.dif_enabled):
        raise ConfigError("the DIF test needs at least one criterion with DIF enabled")
    freq = aggregate(data)
    full, restricted = fit_dif_pair(freq, spec, EmConfig.from_dict(cfg["em"]))
    _checked(full)
    _checked(restricted)
    test = lr_test(restricted, full, df=dif_test_df(spec), hypothesis="no DIF")
    names = [c.name for c in data.criteria]
    info = observed_information(freq, spec, full.params, names)
    se = info.standard_errors()
    rows = []
    for j, item in enumerate(data.item_names):
        for q, crit in enumerate(data.criteria):
            if not spec.dif_enabled[q]:
                continue
            for g in range(1, crit.n_categories):
                phi = float(full.params.phi[q][g, j])
                s = float(se[info.index.phi_position(q, g, j)])
                z = phi / s if s > 0 else math.nan
                p = math.erfc(abs(z) / math.sqrt(2.0)) if math.isfinite(z) else math.nan
                rows.append([item, crit.name, crit.categories[g], _num(phi), _num(s), _num(z),
                             _stars(p)])
    print(f"deviance = {test.statistic:.3f}, df = {test.df}, p = {test.p_value:.4g}")
    record = {
        **_provenance(cfg),
        "test": test.to_dict(),
        "full": _summary(full),
        "restricted": _summary(restricted),
        "information": {"condition_estimate": info.condition_estimate, "flags": info.flags},
    }
    return {
        "dif_test.json": _json(record),
        "dif_coefficients.csv": _csv(["item", "criterion", "group", "phi", "se", "z", "stars"], rows),
        "fit.json": _json({**_provenance(cfg), **_fit_record(full, data)}),
    }


def cmd_cluster(cfg: dict) -> tuple[dict[str, str], str | None]:
    model = cfg["model"]
    if model["rasch_mode"]:
        raise ConfigError("clustering uses the 2PL model; rasch_mode is not supported")
    if model["dim_of_item"] != "per-item":
        raise ConfigError("clustering always starts from the per-item model")
    k = model["k"]
    if not isinstance(k, int) or k <= 2:
        raise ConfigError("clustering needs model.k > 2")
    data = _load_data(cfg)
    spec = build_spec(model, data, k)
    d = cluster(aggregate(data), k, config=EmConfig.from_dict(cfg["em"]),
                dif_enabled=spec.dif_enabled, item_names=data.item_names,
                cold_starts=int(cfg["cold_starts"]))
    _checked(d.initial_fit)
    files = {}
    for fmt in cfg["formats"]:
        if fmt == "json":
            files["dendrogram.json"] = _json({**_provenance(cfg), **d.to_dict()})
        else:
            files[f"dendrogram.{fmt}"] = export_dendrogram(d, fmt)
    chosen = d.initial_fit if d.cut_step == 0 else d.steps[d.cut_step - 1].fit_after
    partition = d.final_partition or []
    files["cut.json"] = _json({
        **_provenance(cfg),
        "cut_step": d.cut_step,
        "s": len(partition),
        "partition": [[data.item_names[j] for j in g] for g in partition],
        "bic_increase_vs_initial": [st.bic_increase_vs_initial for st in d.steps],
        "complete": d.complete,
        "error": d.error,
    })
    files["support_points.csv"] = support_points_csv(chosen, data.item_names)
    print(f"cut after step {d.cut_step}: s = {len(partition)}")
    return files, d.error


def _generator(cfg: dict) -> GeneratorSpec:
    block = cfg["simulate"]
    seed = block.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("simulate.seed must be a non-negative integer")
    truth = block.get("truth")
    if truth is None:
        n = block.get("n", 5000)
        if not isinstance(n, int) or n < 1:
            raise ConfigError("simulate.n must be a positive integer")
        return default_generator(n, seed)
    try:
        spec = ModelSpec.from_dict(truth["spec"])
        params = ParameterSet.from_dict(truth["params"])
        sizes = {tuple(int(g) for g in prof): int(m) for prof, m in truth["group_sizes"]}
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"simulate.truth needs spec, params and group_sizes: {exc}") from None
    return GeneratorSpec(params, spec, sizes, seed=seed)


def cmd_simulate(cfg: dict) -> dict[str, str]:
    gspec = _generator(cfg)
    data = simulate(gspec)
    truth = {
        "seed": gspec.seed,
        "spec": gspec.spec.to_dict(),
        "params": gspec.true_params.to_dict(),
        "group_sizes": [[list(p), m] for p, m in sorted(gspec.group_sizes.items())],
    }
    print(f"simulated {data.n_subjects} subjects on {data.n_items} items")
    return {
        "data.csv": dataset_csv(data),
        "schema.json": _json({**_provenance(cfg), **dataset_schema(data).to_dict()}),
        "truth.json": _json({**_provenance(cfg), **truth}),
    }


def write_artifacts(out: Path, files: dict[str, str]):
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        with open(out / name, "w", encoding="utf-8", newline="") as fh:
            fh.write(files[name])


def run(command: str, config: dict, overrides: dict | None = None) -> int:
    """Execute one command; returns the process exit status."""
    try:
        cfg = effective_config(command, config, overrides or {})
        out = Path(cfg["out"])
        error = None
        if command == "fit":
            files = cmd_fit(cfg)
        elif command == "select-k":
            files = cmd_select_k(cfg)
        elif command == "test-dif":
            files = cmd_test_dif(cfg)
        elif command == "cluster":
            files, error = cmd_cluster(cfg)
        else:
            files = cmd_simulate(cfg)
        write_artifacts(out, files)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"mlcirt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, SpecError, ValueError, KeyError, OSError) as exc:
        print(f"mlcirt: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if error:
        print(f"mlcirt: clustering stopped early: {error}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlcirt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--data", help="response CSV; overrides the config")
    p.add_argument("--schema", help="schema JSON; overrides the config")
    p.add_argument("--out", help="output directory; overrides the config")
    p.add_argument("--seed", type=int, help="EM seed (and simulation seed for simulate)")
    p.add_argument("--drop-incomplete", action="store_true", default=None,
                   help="drop rows with missing responses instead of failing")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    config: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"mlcirt: cannot read config: {exc}", file=sys.stderr)
            return EXIT_INVALID
        if not isinstance(config, dict):
            print("mlcirt: config must be a JSON object", file=sys.stderr)
            return EXIT_INVALID
    overrides = {"data": args.data, "schema": args.schema, "out": args.out,
                 "drop_incomplete": args.drop_incomplete}
    if args.seed is not None:
        config = copy.deepcopy(config)
        config.setdefault("em", {})["seed"] = args.seed
        if args.command == "simulate":
            config.setdefault("simulate", {})["seed"] = args.seed
    return run(args.command, config, overrides)


if __name__ == "__main__":
    sys.exit(main())

"""Multidimensional latent-class 2PL IRT models with uniform DIF.

The package fits discrete-ability (latent class) two-parameter logistic
models by EM, selects the number of classes by BIC, tests for uniform
differential item functioning and for unidimensionality, and clusters items
into unidimensional groups by Wald-driven hierarchical agglomeration.
"""

from .cluster import Dendrogram, MergeStep, cluster, cut, export_dendrogram
from .data import (
    Criterion,
    DataError,
    FrequencyTable,
    ResponseDataset,
    Schema,
    aggregate,
    ingest_csv,
    make_dataset,
)
from .em import EmConfig, FitResult, e_step, fit, m_step_pi, m_step_structural
from .inference import (
    InfoMatrix,
    NumericalError,
    TestResult,
    bic,
    dif_test,
    lr_test,
    n_par,
    observed_information,
    select_k,
    unidim_constraint,
    wald_test,
)
from .likelihood import class_conditional, item_logit, log_likelihood, manifest
from .model import FreeIndex, ModelSpec, ParameterSet, SpecError
from .synthetic import (
    GeneratorSpec,
    brute_force_loglik,
    brute_force_manifest,
    default_generator,
    dif_generator,
    simulate,
    two_trait_generator,
)

__version__ = "0.1.0"

__all__ = [
    "Criterion", "DataError", "Dendrogram", "EmConfig", "FitResult", "FreeIndex",
    "FrequencyTable", "GeneratorSpec", "InfoMatrix", "MergeStep", "ModelSpec",
    "NumericalError", "ParameterSet", "ResponseDataset", "Schema", "SpecError",
    "TestResult", "aggregate", "bic", "brute_force_loglik", "brute_force_manifest",
    "class_conditional", "cluster", "cut", "default_generator", "dif_generator", "dif_test",
    "e_step", "export_dendrogram",
    "fit", "ingest_csv", "item_logit", "log_likelihood", "lr_test", "m_step_pi",
    "m_step_structural", "make_dataset", "manifest", "n_par", "observed_information",
    "select_k", "simulate", "two_trait_generator", "unidim_constraint", "wald_test",
]

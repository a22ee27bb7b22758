"""Desk-scale lab for localized unlearning.

Thin Python layer over the native ``loclab._core`` module. JSON-valued
entry points are decoded into plain dicts here.
"""

import json

from ._core import (
    ContractError,
    DimensionError,
    InstabilityError,
    InsufficientUnlearningError,
    IoError,
    LoclabError,
    Model,
    ParseError,
    TrainingError,
    __version__,
    aues,
    aues_permutation_test,
    draw_region,
    ks_test,
    mu95,
    mu95_bootstrap_test,
    random_region,
    selection_size,
)
from . import _core


def author_corpus(seed, n_entities, attrs_per_entity=4, k_perturbed=3, forget_ratio=0.0, split_seed=0):
    """Synthetic author corpus as a dict; split into forget/retain when forget_ratio > 0."""
    return json.loads(
        _core.author_corpus_json(seed, n_entities, attrs_per_entity, k_perturbed, forget_ratio, split_seed)
    )


def pii_corpus(seed, n_records, k_perturbed=3):
    return json.loads(_core.pii_corpus_json(seed, n_records, k_perturbed))


def default_spec(kind):
    """Default experiment spec for 'revisit', 'controlled', 'l2_distill' or 'pii_controlled'."""
    return json.loads(_core.default_spec_json(kind))


def config_hash(spec):
    return _core.config_hash(json.dumps(spec))


def run_experiment(spec, jobs=1, out_dir=None):
    """Runs the experiment described by ``spec`` and returns the report as a dict.

    With ``out_dir`` the report, summary CSV, timings and curves are also written there.
    """
    text = _core.run_experiment_json(json.dumps(spec), jobs, "" if out_dir is None else str(out_dir))
    return json.loads(text)


__all__ = [
    "ContractError",
    "DimensionError",
    "InstabilityError",
    "InsufficientUnlearningError",
    "IoError",
    "LoclabError",
    "Model",
    "ParseError",
    "TrainingError",
    "__version__",
    "author_corpus",
    "aues",
    "aues_permutation_test",
    "config_hash",
    "default_spec",
    "draw_region",
    "ks_test",
    "mu95",
    "mu95_bootstrap_test",
    "pii_corpus",
    "random_region",
    "run_experiment",
    "selection_size",
]

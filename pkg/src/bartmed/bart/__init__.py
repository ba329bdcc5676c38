"""Bayesian additive regression trees for the mediator regression."""
from ._backend import BACKEND
from .model import (
    BartConfig,
    BartPosterior,
    fit_bart,
    load_posterior,
    predict,
    sample_predictive,
    save_posterior,
)
from .sampler import BartSampler, Tree, encode, make_cutpoints, split_probability

__all__ = [
    "BACKEND",
    "BartConfig",
    "BartPosterior",
    "BartSampler",
    "Tree",
    "encode",
    "fit_bart",
    "load_posterior",
    "make_cutpoints",
    "predict",
    "sample_predictive",
    "save_posterior",
    "split_probability",
]

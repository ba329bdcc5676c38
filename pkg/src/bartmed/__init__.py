"""Causal mediation of a continuous exposure on a daily count outcome.

Quasi-Poisson outcome regression, a BART (or spline-linear) mediator model,
closed-form nested-counterfactual means and Bayesian-bootstrap intervals.
"""
__version__ = "0.1.0"

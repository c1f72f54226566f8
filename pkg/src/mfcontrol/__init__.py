"""Solvers and benchmarks for partially observed mean-field control.

Discrete-time controlled systems whose hidden dynamics depend on the law of
the hidden state, observed through noise.  The library quantizes state and
observation spaces, runs a measure-space dynamic program over a finite
codebook of joint marginals, and validates it against an exact path-measure
oracle and the closed-form linear-quadratic solution.
"""

__version__ = "0.1.0"

from . import dp, filtering, lq_analytic, measures, model, quantize, simkit  # noqa: F401

"""Simulation designs, exact discrete laws and the Monte Carlo benchmark."""

from .benchmark import BenchmarkReport, run_benchmark
from .dgp import VARIANTS, DgpOracle, DgpParams, DgpSpec, TrueDrf, simulate_dgp
from .discrete import (DiscreteLaw, additive_toy, load_toy, multiplicative_toy,
                       nuc_reduction_toy, toy_from_params, unconfounded_toy, uniform_toy)

__all__ = [
    "BenchmarkReport", "DgpOracle", "DgpParams", "DgpSpec", "DiscreteLaw", "TrueDrf",
    "VARIANTS", "additive_toy", "load_toy", "multiplicative_toy", "nuc_reduction_toy",
    "run_benchmark", "simulate_dgp", "toy_from_params", "unconfounded_toy", "uniform_toy",
]

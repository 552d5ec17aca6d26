"""Asymptotic-preserving Q1 finite element solver for strongly anisotropic elliptic problems."""

from .expr import parse, evaluate, eval_expr
from .grid import Grid, build as build_grid
from .problem import BoxSource, ProblemSpec
from .solver import APOptions, APSolution, ap_solve, ap_solve_monolithic, l_solve, p_solve

__version__ = "0.1.0"

__all__ = [
    "parse",
    "evaluate",
    "eval_expr",
    "Grid",
    "build_grid",
    "ProblemSpec",
    "BoxSource",
    "APOptions",
    "APSolution",
    "ap_solve",
    "ap_solve_monolithic",
    "l_solve",
    "p_solve",
]

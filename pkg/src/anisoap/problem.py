"""Problem definition: domain, anisotropy ratio, coefficients and source."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Union

import numpy as np

from . import expr as ex

__all__ = ["ProblemSpec", "BoxSource", "Source"]


class Source(Protocol):
    """A source term that assembles its own load vector exactly."""

    def load_vector(self, grid) -> np.ndarray: ...


@dataclass(frozen=True)
class BoxSource:
    """Normalised indicator ``1/((x1-x0)(z1-z0))`` of a rectangle.

    The load is integrated exactly against the hat functions, so supports
    narrower than a cell are still seen by the grid.
    """

    x0: float
    x1: float
    z0: float
    z1: float

    @classmethod
    def centered(cls, a: float) -> "BoxSource":
        return cls(-a, a, -a, a)

    def load_vector(self, grid) -> np.ndarray:
        height = 1.0 / ((self.x1 - self.x0) * (self.z1 - self.z0))
        ix = _hat_box_integrals(grid.x_nodes, self.x0, self.x1)[1:-1]
        iz = _hat_box_integrals(grid.z_nodes, self.z0, self.z1)
        return height * np.outer(ix, iz).ravel()


def _hat_box_integrals(nodes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """``∫_lo^hi hat_i`` for every hat function on ``nodes``."""
    out = np.zeros(nodes.size)
    for c in range(nodes.size - 1):
        a, b = nodes[c], nodes[c + 1]
        s, t = max(a, lo), min(b, hi)
        if t <= s:
            continue
        h = b - a
        # right-rising hat on the cell is (x-a)/h, left-falling is (b-x)/h
        rise = ((t - a) ** 2 - (s - a) ** 2) / (2 * h)
        out[c + 1] += rise
        out[c] += (t - s) - rise
    return out


SourceLike = Union[ex.Num, ex.Var, ex.Neg, ex.BinOp, ex.Call, BoxSource]


@dataclass(frozen=True)
class ProblemSpec:
    x_lo: float
    x_hi: float
    z_lo: float
    z_hi: float
    eps: float
    A_perp: ex.Expr
    A_z: ex.Expr
    f: SourceLike
    exact: ex.Expr | None = None
    constants: Mapping[str, float] = field(default_factory=dict)
    name: str = "custom"
    # "interpolated": Q1 interpolant of f times the mass matrix;
    # "quadrature": f sampled at the Gauss points.
    load_rule: str = "interpolated"

    def __post_init__(self):
        if self.load_rule not in ("interpolated", "quadrature"):
            raise ValueError(f"unknown load rule {self.load_rule!r}")

    @property
    def Lx(self) -> float:
        return self.x_hi - self.x_lo

    @property
    def Lz(self) -> float:
        return self.z_hi - self.z_lo

    def bindings(self) -> dict[str, float]:
        b = {"eps": float(self.eps), "Lx": self.Lx, "Lz": self.Lz}
        b.update({k: float(v) for k, v in self.constants.items()})
        return b

    def with_eps(self, eps: float) -> "ProblemSpec":
        return dataclasses.replace(self, eps=float(eps))

    @classmethod
    def from_strings(
        cls,
        domain,
        eps: float,
        A_perp: str,
        A_z: str,
        f: str,
        exact: str | None = None,
        constants: Mapping[str, float] | None = None,
        name: str = "custom",
        load_rule: str = "interpolated",
    ) -> "ProblemSpec":
        x_lo, x_hi, z_lo, z_hi = (float(v) for v in domain)
        return cls(
            x_lo,
            x_hi,
            z_lo,
            z_hi,
            float(eps),
            ex.parse(A_perp),
            ex.parse(A_z),
            ex.parse(f),
            ex.parse(exact) if exact is not None else None,
            dict(constants or {}),
            name,
            load_rule,
        )

"""Tensor-product grids and the discrete z-mean / fluctuation operators.

Nodes in x are ``x_0 .. x_{Nx+1}``; the two end nodes carry the Dirichlet
condition and are not degrees of freedom.  Nodes in z are ``z_1 .. z_{Nz}``
and all of them are unknowns (Neumann condition is natural).  Two-dimensional
nodal vectors are stored x-major, ``index = n * Nz + k``, so the coupling
between neighbouring x-columns gives a bandwidth of about ``Nz``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Grid", "GridError", "build", "uniform", "z_average", "fluctuation", "expand_mean"]


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    x_nodes: np.ndarray
    z_nodes: np.ndarray
    uniform: bool
    z_weights: np.ndarray = field(repr=False)

    @property
    def Nx(self) -> int:
        """Number of interior x nodes (1D unknowns)."""
        return self.x_nodes.size - 2

    @property
    def Nz(self) -> int:
        return self.z_nodes.size

    @property
    def Lx(self) -> float:
        return float(self.x_nodes[-1] - self.x_nodes[0])

    @property
    def Lz(self) -> float:
        return float(self.z_nodes[-1] - self.z_nodes[0])

    @property
    def hx(self) -> np.ndarray:
        return np.diff(self.x_nodes)

    @property
    def hz(self) -> np.ndarray:
        return np.diff(self.z_nodes)

    @property
    def n_dofs_2d(self) -> int:
        return self.Nx * self.Nz

    @property
    def n_dofs_1d(self) -> int:
        return self.Nx

    @property
    def x_interior(self) -> np.ndarray:
        return self.x_nodes[1:-1]

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of the 2D unknowns, each shaped ``(Nx, Nz)``."""
        return np.meshgrid(self.x_interior, self.z_nodes, indexing="ij")

    def as_2d(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.size != self.n_dofs_2d:
            raise GridError(f"field of size {u.size} does not match {self.Nx}x{self.Nz} grid")
        return u.reshape(self.Nx, self.Nz)

    def max_h(self) -> float:
        return float(max(self.hx.max(), self.hz.max()))

    def __repr__(self) -> str:
        return f"Grid(Nx={self.Nx}, Nz={self.Nz}, x=[{self.x_nodes[0]}, {self.x_nodes[-1]}], z=[{self.z_nodes[0]}, {self.z_nodes[-1]}])"


def _hat_integrals(nodes: np.ndarray) -> np.ndarray:
    h = np.diff(nodes)
    w = np.zeros(nodes.size)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def _check_nodes(nodes, what: str) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2:
        raise GridError(f"{what} nodes must be a 1D array with at least two entries")
    if not np.all(np.isfinite(nodes)):
        raise GridError(f"{what} nodes must be finite")
    if np.any(np.diff(nodes) <= 0):
        raise GridError(f"{what} nodes must be strictly increasing")
    return nodes


def build(
    x_lo: float,
    x_hi: float,
    z_lo: float,
    z_hi: float,
    Nx: int | None = None,
    Nz: int | None = None,
    *,
    x_nodes=None,
    z_nodes=None,
) -> Grid:
    """Build a grid with ``Nx`` interior x nodes and ``Nz`` z nodes.

    Explicit node arrays override the uniform spacing in that direction;
    their end points must coincide with the given bounds.
    """
    if not (x_hi > x_lo) or not (z_hi > z_lo):
        raise GridError("degenerate interval: bounds must satisfy lo < hi")
    if x_nodes is None:
        if Nx is None or Nx < 1:
            raise GridError("Nx must be >= 1")
        xs = np.linspace(x_lo, x_hi, Nx + 2)
    else:
        xs = _check_nodes(x_nodes, "x")
        if xs.size < 3:
            raise GridError("x nodes need at least one interior node")
    if z_nodes is None:
        if Nz is None or Nz < 2:
            raise GridError("Nz must be >= 2")
        zs = np.linspace(z_lo, z_hi, Nz)
    else:
        zs = _check_nodes(z_nodes, "z")
    for nodes, lo, hi, what in ((xs, x_lo, x_hi, "x"), (zs, z_lo, z_hi, "z")):
        if not (np.isclose(nodes[0], lo) and np.isclose(nodes[-1], hi)):
            raise GridError(f"{what} nodes must span [{lo}, {hi}]")
    is_uniform = x_nodes is None and z_nodes is None
    return Grid(xs, zs, is_uniform, _hat_integrals(zs))


def uniform(x_lo, x_hi, z_lo, z_hi, Nx: int, Nz: int) -> Grid:
    return build(x_lo, x_hi, z_lo, z_hi, Nx, Nz)


def z_average(g: Grid, u: np.ndarray) -> np.ndarray:
    """Exact z-mean of a field that is piecewise linear in z."""
    return g.as_2d(u) @ g.z_weights / g.Lz


def expand_mean(g: Grid, ubar: np.ndarray) -> np.ndarray:
    """Lift a 1D field to the z-constant 2D field with the same values."""
    ubar = np.asarray(ubar, dtype=float)
    if ubar.size != g.Nx:
        raise GridError(f"1D field of size {ubar.size} does not match Nx={g.Nx}")
    return np.repeat(ubar, g.Nz)


def fluctuation(g: Grid, u: np.ndarray) -> np.ndarray:
    u2 = g.as_2d(u)
    return (u2 - z_average(g, u)[:, None]).ravel()

"""Spatial core: periodic grid, film state, and conservative flux forms.

Two one-dimensional thin-film models are supported, plus a convex mix of
their drift terms and a rewritten flux form of the second model:

    model1            h_t = -h h_x      - S [ (|h|^3 + eps)(h_x + h_xxx) ]_x
    model2            h_t = -2 h^2 h_x  - S [ (|h|^3 + eps)(h_x + h_xxx) ]_x
    mixed(alpha)      drift = alpha*h h_x + (1-alpha)*q*h^2 h_x
    model2_rewritten  h_t = -S [ (|h|^3 + eps)(h + h_xx + 2x/(3S))_x ]_x

Everything is discretized with second-order centered differences in
conservative face-flux form on a uniform periodic mesh, so the discrete
right-hand side telescopes to zero total mass change.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MODEL1 = "model1"
MODEL2 = "model2"
MIXED = "mixed"
MODEL2_REWRITTEN = "model2_rewritten"
VARIANTS = (MODEL1, MODEL2, MIXED, MODEL2_REWRITTEN)


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform periodic mesh on (-a, a) with nodes x_j = -a + j*dx."""

    a: float
    n: int
    dx: float = field(init=False, compare=False)
    x: np.ndarray = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.a > 0.0:
            raise ValueError("grid half width must satisfy a > 0")
        if int(self.n) != self.n or self.n < 8:
            raise ValueError("grid needs n >= 8 cells")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "dx", 2.0 * self.a / self.n)
        x = -self.a + self.dx * np.arange(self.n)
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    def domain_length(self) -> float:
        return 2.0 * self.a

    def small_domain(self) -> bool:
        # threshold below which the sharp Poincare constant closes the
        # long-time and global energy estimates
        return self.domain_length() < np.pi


@dataclass(frozen=True)
class FilmState:
    """Film thickness samples on a grid at one time instant."""

    grid: PeriodicGrid
    h: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.shape != (self.grid.n,):
            raise ValueError(
                f"state has {h.shape} values for a grid of {self.grid.n} cells"
            )
        if not np.all(np.isfinite(h)):
            raise ValueError("film thickness values must be finite")
        object.__setattr__(self, "h", h)

    def with_h(self, h, t=None) -> "FilmState":
        return FilmState(self.grid, h, self.t if t is None else t)


@dataclass(frozen=True)
class ModelSpec:
    """Which PDE variant to run and its physical/regularization parameters.

    S is the modified Weber number multiplying the surface-tension flux,
    eps regularizes the |h|^3 mobility, and A is the reference height of
    the entropy integrand (meaningful only when A >= max|h| over a run).
    alpha blends the two drift terms for the mixed variant, whose quadratic
    drift coefficient is exposed as ``mixed_quad_coeff`` (the two source
    models disagree on its normalization, so it is configuration).
    """

    variant: str
    S: float = 1.0
    eps: float = 0.0
    A: float = 1.0
    alpha: float = 0.5
    mixed_quad_coeff: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.S > 0.0:
            raise ValueError("S must satisfy S > 0")
        if self.eps < 0.0:
            raise ValueError("eps must satisfy eps >= 0")
        if not self.A > 0.0:
            raise ValueError("A must satisfy A > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.mixed_quad_coeff > 0.0:
            raise ValueError("mixed_quad_coeff must be positive")

    def with_eps(self, eps: float) -> "ModelSpec":
        return replace(self, eps=eps)


@dataclass(frozen=True)
class FluxField:
    """Fluxes at the n periodic cell faces; J[j] sits at x_{j+1/2}."""

    J: np.ndarray


def _d1(h: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(h, -1) - np.roll(h, 1)) / (2.0 * dx)


def _d2(h: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(h, -1) - 2.0 * h + np.roll(h, 1)) / dx**2


def _d3(h: np.ndarray, dx: float) -> np.ndarray:
    return (np.roll(h, -2) - 2.0 * np.roll(h, -1) + 2.0 * np.roll(h, 1)
            - np.roll(h, 2)) / (2.0 * dx**3)


def d1(state: FilmState) -> np.ndarray:
    """Centered first derivative at nodes (second order, periodic)."""
    return _d1(state.h, state.grid.dx)


def d2(state: FilmState) -> np.ndarray:
    """Centered second derivative at nodes (second order, periodic)."""
    return _d2(state.h, state.grid.dx)


def d3(state: FilmState) -> np.ndarray:
    """Centered third derivative at nodes (second order, periodic)."""
    return _d3(state.h, state.grid.dx)


def _drift_cell(h: np.ndarray, spec: ModelSpec) -> np.ndarray:
    # antiderivative of the drift term, so the drift enters in flux form:
    # h h_x = (h^2/2)_x and q h^2 h_x = (q h^3/3)_x
    if spec.variant == MODEL1:
        return 0.5 * h * h
    if spec.variant == MODEL2:
        return (2.0 / 3.0) * h**3
    if spec.variant == MIXED:
        q = spec.mixed_quad_coeff
        return spec.alpha * 0.5 * h * h + (1.0 - spec.alpha) * q * h**3 / 3.0
    raise ValueError(f"no drift flux for variant {spec.variant!r}")


def _mobility_face(h: np.ndarray, eps: float) -> np.ndarray:
    return 0.5 * (np.abs(h) ** 3 + np.abs(np.roll(h, -1)) ** 3) + eps


def flux_array(h: np.ndarray, grid: PeriodicGrid, spec: ModelSpec) -> np.ndarray:
    """Face fluxes J_{j+1/2} for the drift + surface-tension variants."""
    if spec.variant == MODEL2_REWRITTEN:
        raise ValueError("model2_rewritten is served by flux_rewritten")
    dx = grid.dx
    f = _drift_cell(h, spec)
    drift_face = 0.5 * (f + np.roll(f, -1))
    hp1 = np.roll(h, -1)
    g1 = (hp1 - h) / dx
    g3 = (np.roll(h, -2) - 3.0 * hp1 + 3.0 * h - np.roll(h, 1)) / dx**3
    return drift_face + spec.S * _mobility_face(h, spec.eps) * (g1 + g3)


def flux(state: FilmState, spec: ModelSpec) -> FluxField:
    return FluxField(flux_array(state.h, state.grid, spec))


def flux_rewritten_array(h: np.ndarray, grid: PeriodicGrid, spec: ModelSpec) -> np.ndarray:
    """Face fluxes S*m*(h + h_xx + 2x/(3S))_x for the rewritten form.

    The coordinate term is linear, so its face difference is taken in the
    periodic minimal-image sense and contributes the constant 2/(3S) at
    every face, seam included.  With the raw node values the seam face
    would see the full -2a jump of x, constants would not be steady
    states, and the variant could not be time stepped.
    """
    if spec.variant != MODEL2_REWRITTEN:
        raise ValueError("flux_rewritten requires the model2_rewritten variant")
    dx = grid.dx
    w = h + _d2(h, dx)
    dw = (np.roll(w, -1) - w) / dx + 2.0 / (3.0 * spec.S)
    return spec.S * _mobility_face(h, spec.eps) * dw


def flux_rewritten(state: FilmState, spec: ModelSpec) -> FluxField:
    return FluxField(flux_rewritten_array(state.h, state.grid, spec))


def rhs_array(h: np.ndarray, grid: PeriodicGrid, spec: ModelSpec) -> np.ndarray:
    """Conservative right-hand side -(J_{j+1/2} - J_{j-1/2})/dx."""
    if spec.variant == MODEL2_REWRITTEN:
        J = flux_rewritten_array(h, grid, spec)
    else:
        J = flux_array(h, grid, spec)
    return -(J - np.roll(J, 1)) / grid.dx


def rhs(state: FilmState, spec: ModelSpec) -> np.ndarray:
    return rhs_array(state.h, state.grid, spec)


def dispersion(hbar: float, k: float, spec: ModelSpec) -> complex:
    """Growth rate of a small perturbation exp(ikx + lambda t) about h = hbar.

    The real part S*(|hbar|^3 + eps)*k^2*(1 - k^2) is shared by all
    variants; the imaginary part carries the drift speed.  The rewritten
    variant linearizes identically to model2.
    """
    if spec.variant == MODEL1:
        speed = hbar
    elif spec.variant in (MODEL2, MODEL2_REWRITTEN):
        speed = 2.0 * hbar**2
    else:
        q = spec.mixed_quad_coeff
        speed = spec.alpha * hbar + (1.0 - spec.alpha) * q * hbar**2
    growth = spec.S * (np.abs(hbar) ** 3 + spec.eps) * k**2 * (1.0 - k**2)
    return complex(growth, -speed * k)

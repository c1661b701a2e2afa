"""Exact polynomial frames on R^4 and their Lie brackets.

A rank-2 structure is given in normal form by two polynomials ``A`` and ``B``::

    X1 = d/dx1,    X2 = d/dx2 + A d/dx3 + B d/dx4

with ``(X1, X2)`` declared orthonormal. Everything downstream (brackets, the
singular line field, divergences) is computed by exact term arithmetic on
:class:`Poly4`, so no differentiation error enters the checks.

Axis indices follow the mathematical convention ``1..4`` wherever a *partial
derivative* is requested (``p.partial(1)`` is d/dx1); arrays of points are
ordinary 0-based numpy arrays with a trailing axis of length 4.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateFrame, InputError

_CHUNK = 1 << 14


def _check_exponent(e) -> tuple:
    e = tuple(e)
    if len(e) != 4:
        raise ValueError(f"exponent must have 4 entries, got {e!r}")
    out = []
    for k in e:
        if isinstance(k, bool) or int(k) != k or k < 0:
            raise ValueError(f"exponents must be non-negative integers, got {e!r}")
        out.append(int(k))
    return tuple(out)


class Poly4:
    """Multivariate polynomial in ``x1..x4`` with float coefficients.

    Terms are stored as ``{(e1, e2, e3, e4): coeff}`` with zero coefficients
    dropped. Instances are immutable and hashable.
    """

    __slots__ = ("_terms", "_hash", "_compiled")

    def __init__(self, terms: Mapping | None = None):
        clean: dict = {}
        for e, c in (terms or {}).items():
            e = _check_exponent(e)
            c = float(c)
            if not math.isfinite(c):
                raise ValueError(f"non-finite coefficient {c!r}")
            clean[e] = clean.get(e, 0.0) + c
        self._terms = MappingProxyType({e: c for e, c in clean.items() if c != 0.0})
        self._hash = None
        self._compiled = None

    # construction helpers
    @classmethod
    def const(cls, c: float) -> "Poly4":
        return cls({(0, 0, 0, 0): c})

    @classmethod
    def var(cls, axis: int) -> "Poly4":
        """The coordinate ``x_axis`` (axis in 1..4)."""
        e = [0, 0, 0, 0]
        e[axis - 1] = 1
        return cls({tuple(e): 1.0})

    @classmethod
    def monomial(cls, exps: Sequence[int], coeff: float = 1.0) -> "Poly4":
        return cls({tuple(exps): coeff})

    @property
    def terms(self) -> Mapping:
        return self._terms

    @property
    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=0)

    def is_zero(self) -> bool:
        return not self._terms

    def depends_on(self, axis: int) -> bool:
        return any(e[axis - 1] > 0 for e in self._terms)

    # arithmetic
    def _coerce(self, other):
        if isinstance(other, Poly4):
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Poly4.const(float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms = dict(self._terms)
        for e, c in other._terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Poly4(terms)

    __radd__ = __add__

    def __neg__(self):
        return Poly4({e: -c for e, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        terms: dict = {}
        for e1, c1 in self._terms.items():
            for e2, c2 in other._terms.items():
                e = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2], e1[3] + e2[3])
                terms[e] = terms.get(e, 0.0) + c1 * c2
        return Poly4(terms)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if int(k) != k or k < 0:
            raise ValueError("only non-negative integer powers")
        out = Poly4.const(1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    def __eq__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return dict(self._terms) == dict(other._terms)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self._terms.items()))
        return self._hash

    def __repr__(self):
        return f"Poly4({self})"

    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for e in sorted(self._terms, key=lambda e: (sum(e), tuple(-k for k in e))):
            c = self._terms[e]
            mono = "*".join(
                f"x{i + 1}" + (f"^{k}" if k > 1 else "") for i, k in enumerate(e) if k
            )
            if not mono:
                parts.append(f"{c:g}")
            elif c == 1.0:
                parts.append(mono)
            elif c == -1.0:
                parts.append(f"-{mono}")
            else:
                parts.append(f"{c:g}*{mono}")
        return " + ".join(parts).replace("+ -", "- ")

    # calculus
    def partial(self, axis: int) -> "Poly4":
        """Exact formal partial derivative with respect to ``x_axis``."""
        if axis not in (1, 2, 3, 4):
            raise ValueError(f"axis must be in 1..4, got {axis}")
        i = axis - 1
        terms = {}
        for e, c in self._terms.items():
            if e[i]:
                ne = list(e)
                ne[i] -= 1
                terms[tuple(ne)] = c * e[i]
        return Poly4(terms)

    def d(self, *axes: int) -> "Poly4":
        """Iterated partial, e.g. ``p.d(2, 1)`` is d^2 p / dx2 dx1."""
        out = self
        for a in axes:
            out = out.partial(a)
        return out

    def gradient(self) -> tuple:
        return tuple(self.partial(a) for a in (1, 2, 3, 4))

    def scale_args(self, factors: Sequence[float]) -> "Poly4":
        """The polynomial ``x -> p(f1 x1, ..., f4 x4)``."""
        terms = {}
        for e, c in self._terms.items():
            terms[e] = c * math.prod(f**k for f, k in zip(factors, e))
        return Poly4(terms)

    # evaluation
    def __call__(self, x):
        return PolyBundle([self])(x)[..., 0]

    def bound(self, box: "DomainBox") -> float:
        """Crude upper bound of ``|p|`` on a box (sum of absolute term bounds)."""
        R = box.abs_max
        return sum(abs(c) * math.prod(r**k for r, k in zip(R, e)) for e, c in self._terms.items())

    def gradient_bound(self, box: "DomainBox") -> float:
        """Upper bound of the Euclidean gradient norm of ``p`` on a box."""
        return math.sqrt(sum(self.partial(a).bound(box) ** 2 for a in (1, 2, 3, 4)))


def poly_eval(p: Poly4, x):
    return p(x)


def poly_partial(p: Poly4, axis: int) -> Poly4:
    return p.partial(axis)


ZERO = Poly4()
ONE = Poly4.const(1.0)


class PolyBundle:
    """Evaluate several polynomials at once on a shared monomial basis.

    ``bundle(x)`` maps points of shape ``(..., 4)`` to ``(..., P)``.
    """

    def __init__(self, polys: Iterable[Poly4]):
        self.polys = tuple(polys)
        monos = sorted({e for p in self.polys for e in p.terms})
        self._single = not monos
        if not monos:
            monos = [(0, 0, 0, 0)]
        self.exps = np.array(monos, dtype=int).reshape(-1, 4)
        index = {e: k for k, e in enumerate(monos)}
        coef = np.zeros((len(self.polys), len(monos)))
        for r, p in enumerate(self.polys):
            for e, c in p.terms.items():
                coef[r, index[e]] = c
        self.coef = coef
        self._maxdeg = self.exps.max(axis=0)
        self._mono_list = [tuple(int(k) for k in e) for e in self.exps]

    def _monomials(self, x):
        n = x.shape[0]
        pw = []
        for v in range(4):
            col = x[:, v]
            table = [None, col]
            for _ in range(2, int(self._maxdeg[v]) + 1):
                table.append(table[-1] * col)
            pw.append(table)
        M = np.empty((n, len(self._mono_list)))
        for k, e in enumerate(self._mono_list):
            acc = None
            for v in range(4):
                if e[v]:
                    acc = pw[v][e[v]] if acc is None else acc * pw[v][e[v]]
            M[:, k] = 1.0 if acc is None else acc
        return M

    def _point(self, x):
        x1, x2, x3, x4 = (float(v) for v in x)
        vals = []
        for e in self._mono_list:
            vals.append((x1 ** e[0]) * (x2 ** e[1]) * (x3 ** e[2]) * (x4 ** e[3]))
        return self.coef @ np.array(vals)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 4:
            raise ValueError(f"points must have trailing dimension 4, got {x.shape}")
        if x.ndim == 1:
            return self._point(x)
        flat = x.reshape(-1, 4)
        out = np.empty((flat.shape[0], len(self.polys)))
        for s in range(0, flat.shape[0], _CHUNK):
            blk = flat[s : s + _CHUNK]
            out[s : s + len(blk)] = self._monomials(blk) @ self.coef.T
        return out.reshape(x.shape[:-1] + (len(self.polys),))


class VectorField4:
    """Polynomial vector field on R^4, ``sum_i components[i] d/dx_i``."""

    __slots__ = ("components", "_bundle", "_jac")

    def __init__(self, components: Sequence[Poly4]):
        comps = tuple(c if isinstance(c, Poly4) else Poly4.const(float(c)) for c in components)
        if len(comps) != 4:
            raise ValueError("a vector field on R^4 needs 4 components")
        self.components = comps
        self._bundle = None
        self._jac = None

    def __getitem__(self, i):
        return self.components[i]

    def __iter__(self):
        return iter(self.components)

    def __eq__(self, other):
        if not isinstance(other, VectorField4):
            return NotImplemented
        return self.components == other.components

    def __hash__(self):
        return hash(self.components)

    def __repr__(self):
        return "VectorField4(" + ", ".join(str(c) for c in self.components) + ")"

    def __add__(self, other):
        return VectorField4([a + b for a, b in zip(self, other)])

    def __sub__(self, other):
        return VectorField4([a - b for a, b in zip(self, other)])

    def __neg__(self):
        return VectorField4([-a for a in self])

    def scaled(self, f) -> "VectorField4":
        """Pointwise product with a scalar polynomial (or number)."""
        return VectorField4([f * a for a in self])

    def is_zero(self) -> bool:
        return all(c.is_zero() for c in self.components)

    def __call__(self, x):
        if self._bundle is None:
            self._bundle = PolyBundle(self.components)
        return self._bundle(x)

    def jacobian(self) -> tuple:
        """``J[i][j] = d component_i / d x_{j+1}`` as polynomials."""
        if self._jac is None:
            self._jac = tuple(tuple(c.partial(j) for j in (1, 2, 3, 4)) for c in self.components)
        return self._jac

    def divergence(self) -> Poly4:
        return sum((c.partial(i + 1) for i, c in enumerate(self.components)), ZERO)

    def apply(self, f: Poly4) -> Poly4:
        """Derivative of the scalar ``f`` along the field."""
        return sum((c * f.partial(i + 1) for i, c in enumerate(self.components)), ZERO)


def lie_bracket(V: VectorField4, W: VectorField4) -> VectorField4:
    """``[V, W] = DW.V - DV.W`` computed exactly."""
    return VectorField4([V.apply(w) - W.apply(v) for v, w in zip(V, W)])


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box ``center +- half`` in R^4."""

    center: tuple
    half: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        h = tuple(float(v) for v in self.half)
        if len(c) != 4 or len(h) != 4:
            raise ValueError("box center and half-widths need 4 entries")
        if any(not (v > 0 and math.isfinite(v)) for v in h):
            raise ValueError(f"half-widths must be positive, got {h}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half", h)

    @classmethod
    def cube(cls, r: float, center=(0.0, 0.0, 0.0, 0.0)) -> "DomainBox":
        return cls(tuple(center), (r, r, r, r))

    @classmethod
    def from_bounds(cls, lo, hi) -> "DomainBox":
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        return cls(tuple((lo + hi) / 2), tuple((hi - lo) / 2))

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.center) - np.array(self.half)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.center) + np.array(self.half)

    @property
    def abs_max(self) -> tuple:
        return tuple(abs(c) + h for c, h in zip(self.center, self.half))

    @property
    def volume(self) -> float:
        return math.prod(2 * h for h in self.half)

    @property
    def diameter(self) -> float:
        return 2 * math.sqrt(sum(h * h for h in self.half))

    def contains(self, x, atol: float = 1e-12):
        x = np.asarray(x, float)
        return np.all((x >= self.lo - atol) & (x <= self.hi + atol), axis=-1)

    def grid(self, n: int = 17) -> np.ndarray:
        """Tensor grid with ``n`` points per axis, boundary included, shape (n^4, 4)."""
        axes = [np.linspace(l, h, n) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, 4))


DEFAULT_BOX = DomainBox.cube(2.0)


@dataclass(frozen=True, eq=False)
class Frame:
    """Normal-form frame ``X1 = d1``, ``X2 = d2 + A d3 + B d4`` on a box."""

    A: Poly4
    B: Poly4
    box: DomainBox = field(default=DEFAULT_BOX)

    @cached_property
    def X1(self) -> VectorField4:
        return VectorField4([ONE, ZERO, ZERO, ZERO])

    @cached_property
    def X2(self) -> VectorField4:
        return VectorField4([ZERO, ONE, self.A, self.B])

    @cached_property
    def X12(self) -> VectorField4:
        return lie_bracket(self.X1, self.X2)

    @cached_property
    def X112(self) -> VectorField4:
        return lie_bracket(self.X1, self.X12)

    @cached_property
    def X212(self) -> VectorField4:
        return lie_bracket(self.X2, self.X12)

    @cached_property
    def ab_bundle(self) -> PolyBundle:
        """``[A, B, dA/dx1..dA/dx4, dB/dx1..dB/dx4]`` evaluated jointly."""
        return PolyBundle([self.A, self.B, *self.A.gradient(), *self.B.gradient()])

    @cached_property
    def span_bundle(self) -> PolyBundle:
        """Third/fourth components of X2, X12, X112, X212 (the rest are constant)."""
        return PolyBundle(
            [
                self.A, self.B,
                self.X12[2], self.X12[3],
                self.X112[2], self.X112[3],
                self.X212[2], self.X212[3],
            ]
        )

    def x2_and_jacobian(self, x):
        """``X2(x)`` and ``DX2(x)`` for points ``(..., 4)``."""
        v = self.ab_bundle(x)
        shape = v.shape[:-1]
        X2 = np.zeros(shape + (4,))
        X2[..., 1] = 1.0
        X2[..., 2] = v[..., 0]
        X2[..., 3] = v[..., 1]
        J = np.zeros(shape + (4, 4))
        J[..., 2, :] = v[..., 2:6]
        J[..., 3, :] = v[..., 6:10]
        return X2, J

    def bracket_columns(self, x) -> np.ndarray:
        """Matrix with columns X1, X2, [X1,X2], [X1,[X1,X2]], [X2,[X1,X2]]; shape (..., 4, 5)."""
        v = self.span_bundle(np.asarray(x, float))
        shape = v.shape[:-1]
        M = np.zeros(shape + (4, 5))
        M[..., 0, 0] = 1.0
        M[..., 1, 1] = 1.0
        M[..., 2, 1] = v[..., 0]
        M[..., 3, 1] = v[..., 1]
        for col, k in ((2, 2), (3, 4), (4, 6)):
            M[..., 2, col] = v[..., k]
            M[..., 3, col] = v[..., k + 1]
        return M

    def frame_norm_bound(self, n: int = 9) -> float:
        """kappa >= max over the box of the operator norm of ``[X1 X2]``.

        Grid maximum inflated by a gradient-bound correction for the cell radius.
        """
        pts = self.box.grid(n)
        X2, _ = self.x2_and_jacobian(pts)
        # [X1 X2]^T [X1 X2] = [[1, 0], [0, |X2|^2]] since X1 = e1 and X2_1 = 0
        nrm = np.sqrt(np.maximum(1.0, np.sum(X2 * X2, axis=-1)))
        rho = float(np.max(np.array(self.box.half) / (n - 1)) * 2.0)
        lip = math.hypot(self.A.gradient_bound(self.box), self.B.gradient_bound(self.box))
        return float(nrm.max() + lip * rho)

    def scaled(self, c: float) -> "Frame":
        return Frame(self.A * c, self.B * c, self.box)

    def with_box(self, box: DomainBox) -> "Frame":
        return Frame(self.A, self.B, box)

    def __repr__(self):
        return f"Frame(A={self.A}, B={self.B}, box={self.box})"


x1, x2, x3, x4 = (Poly4.var(i) for i in (1, 2, 3, 4))


def engel_frame(box: DomainBox = DEFAULT_BOX) -> Frame:
    """Engel structure ``A = x1``, ``B = x1^2 / 2``."""
    return Frame(x1, x1 * x1 * 0.5, box)


def cubic_frame(box: DomainBox = DEFAULT_BOX) -> Frame:
    """``A = x1``, ``B = x1^3 / 6``; its degenerate set is the hyperplane ``x1 = 0``."""
    return Frame(x1, (x1**3) / 6.0, box)


def contracting_frame(box: DomainBox = DEFAULT_BOX) -> Frame:
    """``A = x1``, ``B = x1^2/2 + x1 x4``: singular field with ``div X = 2 x1``."""
    return Frame(x1, x1 * x1 * 0.5 + x1 * x4, box)


def ef_coefficients(frame: Frame) -> tuple:
    """Coefficients of ``[X2, [X1, X2]] = E d3 + F d4``, written out term by term."""
    A, B = frame.A, frame.B
    A1, B1 = A.d(1), B.d(1)
    E = A.d(2, 1) + A * A.d(3, 1) + B * A.d(1, 4) - A1 * A.d(3) - B1 * A.d(4)
    F = B.d(2, 1) + A * B.d(3, 1) + B * B.d(1, 4) - A1 * B.d(3) - B1 * B.d(4)
    return E, F


@dataclass(frozen=True)
class GrowthReport:
    ok: bool
    certified: bool
    witness: tuple | None
    chart_ok: bool
    chart_certified: bool
    min_bracket_norm: float
    min_abs_A1: float
    grid_points: int

    def require(self, chart: bool = False) -> "GrowthReport":
        if not self.ok:
            raise DegenerateFrame(
                f"[X1,X2] lies in span(X1,X2) at {self.witness}", witness=self.witness
            )
        if chart and not self.chart_ok:
            raise DegenerateFrame(
                f"dA/dx1 vanishes at {self.witness}; chart normalization unavailable",
                witness=self.witness,
            )
        return self


def growth_check(frame: Frame, n: int = 17, zero_tol: float = 1e-12, strict: bool = False) -> GrowthReport:
    """Check that ``(dA/dx1, dB/dx1)`` never vanishes jointly on the box.

    A grid scan looks for a witness; a Lipschitz bound from the coefficients
    upgrades a clean scan to a certificate when the grid minimum exceeds the
    worst-case variation over one grid cell. ``strict`` raises
    :class:`DegenerateFrame` on failure.
    """
    A1, B1 = frame.A.d(1), frame.B.d(1)
    pts = frame.box.grid(n)
    vals = PolyBundle([A1, B1])(pts)
    a, b = np.abs(vals[:, 0]), np.abs(vals[:, 1])
    both_zero = (a <= zero_tol) & (b <= zero_tol)
    rho = float(np.max(np.array(frame.box.half)) * 2.0 / (n - 1))  # cell half-diagonal in 4-D
    la, lb = A1.gradient_bound(frame.box), B1.gradient_bound(frame.box)
    margin = np.maximum(a - la * rho, b - lb * rho)
    witness = None
    if both_zero.any():
        witness = tuple(float(v) for v in pts[np.argmax(both_zero)])
    chart_zero = a <= zero_tol
    chart_witness = tuple(float(v) for v in pts[np.argmax(chart_zero)]) if chart_zero.any() else None
    report = GrowthReport(
        ok=witness is None,
        certified=bool(np.all(margin > 0)),
        witness=witness if witness is not None else chart_witness,
        chart_ok=chart_witness is None,
        chart_certified=bool(np.all(a - la * rho > 0)),
        min_bracket_norm=float(np.min(np.hypot(a, b))),
        min_abs_A1=float(a.min()),
        grid_points=len(pts),
    )
    if strict:
        report.require()
    return report


def _best_four_column_sigma(M: np.ndarray) -> np.ndarray:
    """Max over the five 4-column submatrices of the smallest singular value."""
    best = np.zeros(M.shape[:-2])
    for drop in range(5):
        cols = [c for c in range(5) if c != drop]
        s = np.linalg.svd(M[..., cols], compute_uv=False)
        best = np.maximum(best, s[..., -1])
    return best


def hc_mask(frame: Frame, points, tol: float = 1e-9) -> np.ndarray:
    """Vectorized :func:`hc_membership` over points of shape ``(n, 4)``."""
    M = frame.bracket_columns(points)
    scale = np.max(np.linalg.norm(M, axis=-2), axis=-1)
    return _best_four_column_sigma(M) < tol * scale


def hc_membership(frame: Frame, x, tol: float = 1e-9) -> bool:
    """True iff brackets up to order three fail to span R^4 at ``x``."""
    return bool(hc_mask(frame, np.asarray(x, float)[None, :], tol)[0])


def random_poly(rng: np.random.Generator, degree: int = 3, density: float = 0.3, scale: float = 1.0,
                axes: Sequence[int] = (1, 2, 3, 4)) -> Poly4:
    """Random polynomial of total degree ``<= degree`` in the given variables."""
    terms = {}
    for e in itertools.product(range(degree + 1), repeat=4):
        if sum(e) > degree or any(e[a - 1] for a in range(1, 5) if a not in axes):
            continue
        if rng.random() < density:
            terms[e] = scale * rng.uniform(-1.0, 1.0)
    return Poly4(terms)


def random_frame(rng: np.random.Generator, degree: int = 3, box: DomainBox | None = None,
                 perturbation: float = 0.3) -> Frame:
    """Random frame near the Engel normal form with ``dA/dx1`` bounded away from 0.

    ``A = x1 + eps * p``, ``B = x1^2/2 + q`` with random ``p, q`` of degree
    ``<= degree``. Frames whose chart check fails are redrawn.
    """
    box = box or DomainBox.cube(0.5)
    while True:
        A = x1 + random_poly(rng, degree, scale=perturbation)
        B = x1 * x1 * 0.5 + random_poly(rng, degree)
        fr = Frame(A, B, box)
        rep = growth_check(fr, n=7)
        if rep.chart_ok and rep.chart_certified:
            return fr


# -- structure files -------------------------------------------------------

def _parse_coeff(raw, where: str) -> float:
    if isinstance(raw, bool):
        raise InputError(f"{where}: coefficient must be a number or decimal string")
    if isinstance(raw, (int, float)):
        val = float(raw)
    elif isinstance(raw, str):
        try:
            # Fraction gives a correctly rounded float for "0.1", "1/6", "1e-3"
            val = float(Fraction(raw.strip()))
        except (ValueError, ZeroDivisionError):
            raise InputError(f"{where}: cannot parse coefficient {raw!r}") from None
    else:
        raise InputError(f"{where}: coefficient must be a number or decimal string")
    if not math.isfinite(val):
        raise InputError(f"{where}: coefficient is not finite")
    return val


def _parse_terms(rows, name: str) -> Poly4:
    if not isinstance(rows, list):
        raise InputError(f"field '{name}': expected a list of [e1,e2,e3,e4,coeff] rows")
    terms: dict = {}
    for k, row in enumerate(rows):
        where = f"field '{name}'[{k}]"
        if not isinstance(row, list) or len(row) != 5:
            raise InputError(f"{where}: expected [e1,e2,e3,e4,coeff]")
        exps = row[:4]
        for j, e in enumerate(exps):
            if isinstance(e, bool) or not isinstance(e, int) or e < 0:
                raise InputError(f"{where}: exponent e{j + 1}={e!r} must be a non-negative integer")
        key = tuple(exps)
        terms[key] = terms.get(key, 0.0) + _parse_coeff(row[4], where)
    return Poly4(terms)


def parse_structure(text: str) -> Frame:
    """Build a :class:`Frame` from structure JSON text."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise InputError("structure file must contain a JSON object")
    for key in ("A", "B"):
        if key not in data:
            raise InputError(f"missing field '{key}'")
    A = _parse_terms(data["A"], "A")
    B = _parse_terms(data["B"], "B")
    box = DEFAULT_BOX
    if "box" in data:
        b = data["box"]
        if not isinstance(b, dict) or "center" not in b or "half" not in b:
            raise InputError("field 'box': expected {\"center\": [...], \"half\": [...]}")
        try:
            center = [_parse_coeff(v, "field 'box.center'") for v in b["center"]]
            half = [_parse_coeff(v, "field 'box.half'") for v in b["half"]]
            box = DomainBox(tuple(center), tuple(half))
        except (TypeError, ValueError) as exc:
            raise InputError(f"field 'box': {exc}") from None
    return Frame(A, B, box)


def load_structure(path) -> Frame:
    with open(path, encoding="utf-8") as fh:
        return parse_structure(fh.read())


def _poly_rows(p: Poly4) -> list:
    return [[*e, repr(c)] for e, c in sorted(p.terms.items())]


def structure_to_dict(frame: Frame) -> dict:
    return {
        "A": _poly_rows(frame.A),
        "B": _poly_rows(frame.B),
        "box": {"center": list(frame.box.center), "half": list(frame.box.half)},
    }


def structure_hash(frame: Frame) -> str:
    """sha256 of the canonical JSON form of the frame."""
    blob = json.dumps(structure_to_dict(frame), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

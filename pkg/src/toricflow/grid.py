"""Convex potentials on truncated log-coordinate grids.

A torus-invariant Kahler metric omega = i ddbar psi in 2 pi c_1 is stored as
the convex potential psi sampled on the tensor grid [-L, L]^n (x = log |z|^2
coordinates on the open orbit).  The moment map is grad psi with image Delta,
and det D^2 psi dx is the reduced volume density, so every manifold integral
becomes a plain cell sum: the integrands decay like det D^2 psi toward the
box boundary, which makes the rectangle rule superalgebraically accurate and
confines the truncation error to an exponentially small boundary layer.

Potentials are carried in split form  psi = tail + phi:

  * the tail is a closed-form log-sum-exp reference whose derivatives --
    including the Hessian of log det D^2 tail -- are evaluated exactly from
    softmax cumulants;
  * phi is the bounded residual, pinned to zero on the two outermost node
    layers, and is the only part that is finite-differenced.

Without the split, the O(L)-sized values of psi make the roundoff of a
second difference (~ eps L / h^2) overwhelm the exponentially degenerate
det D^2 psi near the boundary; with it, the numerical noise scales with the
local size of phi and dies where the determinant does.

Differencing is 4th-order centered inside, one-sided at the pinned layers
(Fornberg weights).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp

from . import polytope as pt


class GridError(ValueError):
    pass


def fornberg_weights(x0, nodes, order):
    """Finite-difference weights at x0 for derivatives 0..order on nodes."""
    nodes = np.asarray(nodes, dtype=float)
    m = len(nodes)
    C = np.zeros((m, order + 1))
    C[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, m):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 *= c3
            for k in range(mn, 0, -1):
                C[i, k] = c1 * (k * C[i - 1, k - 1] - c5 * C[i - 1, k]) / c2
            C[i, 0] = -c1 * c5 * C[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                C[j, k] = (c4 * C[j, k] - k * C[j, k - 1]) / c3
            C[j, 0] = c4 * C[j, 0] / c3
        c1 = c2
    return C


_DMAT_CACHE = {}


def derivative_matrix(res, h, order):
    """Sparse 1-D derivative matrix: 5-point centered rows inside, 6-point
    one-sided rows at the two pinned layers each side; 4th-order accurate."""
    key = (res, float(h), order)
    if key in _DMAT_CACHE:
        return _DMAT_CACHE[key]
    rows, cols, vals = [], [], []
    x = np.arange(res) * h
    for i in range(res):
        if 2 <= i <= res - 3:
            idx = np.arange(i - 2, i + 3)
        elif i < 2:
            idx = np.arange(0, 6)
        else:
            idx = np.arange(res - 6, res)
        w = fornberg_weights(x[i], x[idx], order)[:, order]
        rows.extend([i] * len(idx))
        cols.extend(idx)
        vals.extend(w)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(res, res))
    _DMAT_CACHE[key] = mat
    return mat


class ReferencePotential:
    """Closed-form log-sum-exp potential psi(x) = log sum_k w_k e^{<x+s, p_k>}.

    p_k are points of Delta (vertices, or lattice points with canonical
    weights), s an optional translation.  The derivatives are the cumulants
    of the softmax distribution sigma over the points: grad = mean,
    Hessian = covariance, and

        D^2 log det H |_{lq} = <H^{-1}, k4[.,.,l,q]> - tr(H^{-1} k3_q H^{-1} k3_l)

    with k3, k4 the third and fourth cumulant tensors.
    """

    def __init__(self, points, log_weights=None, shift=None, kind="custom"):
        self.points = np.asarray(points, dtype=float)
        m, self._n = self.points.shape
        self.log_weights = (np.zeros(m) if log_weights is None
                            else np.asarray(log_weights, dtype=float))
        self.shift = (np.zeros(self._n) if shift is None
                      else np.asarray(shift, dtype=float))
        self.kind = kind
        self._cache = {}

    def _softmax(self, x):
        z = (np.asarray(x, dtype=float) + self.shift) @ self.points.T \
            + self.log_weights
        z -= z.max(axis=-1, keepdims=True)
        s = np.exp(z)
        return s / s.sum(axis=-1, keepdims=True)

    def values(self, x):
        z = (np.asarray(x, dtype=float) + self.shift) @ self.points.T \
            + self.log_weights
        return logsumexp(z, axis=-1)

    def grad(self, x):
        return self._softmax(x) @ self.points

    def moments(self, x):
        """(mean, central mu2/mu3/mu4) of the softmax point distribution;
        leading axes are the grid axes."""
        sig = self._softmax(x)                       # (..., m)
        p = self.points                              # (m, n)
        mean = sig @ p                               # (..., n)
        d = p[None, :, :] - mean.reshape(-1, 1, p.shape[1])   # (N, m, n)
        sl = sig.reshape(-1, sig.shape[-1])                    # (N, m)
        mu2 = np.einsum("km,kmi,kmj->kij", sl, d, d)
        mu3 = np.einsum("km,kmi,kmj,kml->kijl", sl, d, d, d)
        mu4 = np.einsum("km,kmi,kmj,kml,kmq->kijlq", sl, d, d, d, d)
        lead = sig.shape[:-1]
        n = p.shape[1]
        return (mean, mu2.reshape(lead + (n, n)),
                mu3.reshape(lead + (n, n, n)),
                mu4.reshape(lead + (n, n, n, n)))

    def hess(self, x):
        sig = self._softmax(x)
        p = self.points
        mean = sig @ p
        raw = np.einsum("...m,mi,mj->...ij", sig, p, p)
        return raw - np.einsum("...i,...j->...ij", mean, mean)

    def translate(self, v):
        return ReferencePotential(self.points, self.log_weights,
                                  self.shift + np.asarray(v, dtype=float),
                                  kind=self.kind)

    def grid_fields(self, grid):
        """Cached exact tail fields on a grid: values, grad, hess,
        logdet values and logdet Hessian, each with grid-leading axes."""
        key = (grid.res, float(grid.L))
        if key in self._cache:
            return self._cache[key]
        pts = grid.points()
        n = self._n
        mean, mu2, mu3, mu4 = self.moments(pts)
        vals = self.values(pts)
        H = mu2
        det, inv = _invert_spd_batch(H, n)
        k4 = (mu4
              - np.einsum("...ij,...lq->...ijlq", mu2, mu2)
              - np.einsum("...il,...jq->...ijlq", mu2, mu2)
              - np.einsum("...iq,...jl->...ijlq", mu2, mu2))
        term1 = np.einsum("...ij,...ijlq->...lq", inv, k4)
        hk = np.einsum("...aj,...jbl->...abl", inv, mu3)   # A_l = H^-1 k3_l
        term2 = np.einsum("...abq,...bal->...lq", hk, hk)  # tr(A_q A_l)
        fields = {
            "values": vals,
            "grad": np.moveaxis(mean, -1, 0),
            "hess": np.moveaxis(H, (-2, -1), (0, 1)),
            "det": det,
            "logdet": np.log(det),
            "logdet_hess": np.moveaxis(term1 - term2, (-2, -1), (0, 1)),
        }
        self._cache[key] = fields
        return fields

    def to_document(self):
        return {"kind": self.kind,
                "points": self.points.tolist(),
                "log_weights": self.log_weights.tolist(),
                "shift": self.shift.tolist()}

    @classmethod
    def from_document(cls, doc):
        return cls(doc["points"], doc["log_weights"], doc["shift"],
                   kind=doc.get("kind", "custom"))


def _invert_spd_batch(H, n):
    """det and inverse for (..., n, n) SPD fields, n <= 3, closed form."""
    if n == 1:
        det = H[..., 0, 0]
        inv = (1.0 / det)[..., None, None]
        return det, inv
    if n == 2:
        a, b, c = H[..., 0, 0], H[..., 0, 1], H[..., 1, 1]
        det = a * c - b * b
        inv = np.empty_like(H)
        inv[..., 0, 0] = c / det
        inv[..., 1, 1] = a / det
        inv[..., 0, 1] = inv[..., 1, 0] = -b / det
        return det, inv
    det = np.linalg.det(H)
    inv = np.linalg.inv(H)
    return det, inv


def vertex_reference(poly):
    """Smoothed-max potential over the vertex set, unit weights."""
    return ReferencePotential(poly.vertices_float, kind="vertex")


def canonical_reference(poly):
    """Lattice-point potential with weights w_a = prod_facets 1/ell_i(a)!,
    ell_i(a) = <a, nu_i> + 1.

    Pullback of the ambient Fubini-Study metric under the anticanonical
    monomial embedding: a smooth metric with bounded Ricci potential.  On
    CP^1 (weights 1,2,1), projective spaces and their products it is the
    constant-curvature (round) metric.
    """
    pts = poly.lattice_points()
    from math import lgamma
    logw = []
    for a in pts:
        s = 0.0
        for nu in poly.facet_normals:
            ell = int(sum(int(c) * int(n_i) for c, n_i in zip(a, nu))) + 1
            s -= lgamma(ell + 1)
        logw.append(s)
    return ReferencePotential(np.array(pts, dtype=float), np.array(logw),
                              kind="canonical")


@dataclass
class PotentialGrid:
    """psi sampled on [-L, L]^n, pinned to `tail` on the outer two layers."""

    polytope: object
    L: float
    res: int
    values: np.ndarray
    tail: ReferencePotential

    def __post_init__(self):
        n = self.polytope.dim
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.res,) * n:
            raise GridError("values shape %s does not match res=%d, n=%d"
                            % (self.values.shape, self.res, n))
        self.axes = [np.linspace(-self.L, self.L, self.res) for _ in range(n)]
        self.spacing = 2.0 * self.L / (self.res - 1)
        self.cell_volume = self.spacing ** n
        self._d1 = derivative_matrix(self.res, self.spacing, 1)
        self._d2 = derivative_matrix(self.res, self.spacing, 2)
        self._phi = None

    # ------------------------------------------------------------------
    @property
    def dim(self):
        return self.polytope.dim

    def mesh(self):
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self):
        return np.stack(self.mesh(), axis=-1)

    def tail_fields(self):
        return self.tail.grid_fields(self)

    @property
    def phi(self):
        """Bounded residual psi - tail, the finite-differenced part."""
        if self._phi is None:
            self._phi = self.values - self.tail_fields()["values"]
        return self._phi

    def _apply(self, mat, field, axis):
        f = np.moveaxis(np.asarray(field, dtype=float), axis, 0)
        shape = f.shape
        out = mat @ f.reshape(self.res, -1)
        return np.moveaxis(out.reshape(shape), 0, axis)

    def d1(self, field, axis):
        return self._apply(self._d1, field, axis)

    def d2(self, field, axis):
        return self._apply(self._d2, field, axis)

    def gradient(self, field):
        return np.stack([self.d1(field, k) for k in range(self.dim)])

    def hessian(self, field):
        n = self.dim
        field = np.asarray(field, dtype=float)
        H = np.empty((n, n) + field.shape)
        for i in range(n):
            H[i, i] = self.d2(field, i)
            for j in range(i + 1, n):
                H[i, j] = H[j, i] = self.d1(self.d1(field, i), j)
        return H

    def potential_gradient(self):
        """grad psi = exact tail gradient + FD(phi)."""
        return self.tail_fields()["grad"] + self.gradient(self.phi)

    def potential_hessian(self):
        """D^2 psi = exact tail Hessian + FD(phi)."""
        return self.tail_fields()["hess"] + self.hessian(self.phi)

    # ------------------------------------------------------------------
    def containment_slack(self):
        # grid-order tolerance; one-sided stencils on ridge profiles dominate
        return 100.0 * self.spacing ** 4 + 1e-9

    def _principal_minors_ok(self, H):
        n = self.dim
        if n == 1:
            return bool(np.all(H[0, 0] > 0))
        det2 = H[0, 0] * H[1, 1] - H[0, 1] ** 2
        if n == 2:
            return bool(np.all(H[0, 0] > 0) and np.all(det2 > 0))
        det3 = (H[0, 0] * (H[1, 1] * H[2, 2] - H[1, 2] ** 2)
                - H[0, 1] * (H[0, 1] * H[2, 2] - H[1, 2] * H[0, 2])
                + H[0, 2] * (H[0, 1] * H[1, 2] - H[1, 1] * H[0, 2]))
        return bool(np.all(H[0, 0] > 0) and np.all(det2 > 0)
                    and np.all(det3 > 0))

    def convexity_ok(self, values=None):
        g = self if values is None else self.with_values(values)
        return self._principal_minors_ok(g.potential_hessian())

    def containment_ok(self, values=None, slack=None):
        g = self if values is None else self.with_values(values)
        mm = g.potential_gradient()
        pts = np.moveaxis(mm, 0, -1)
        s = self.containment_slack() if slack is None else slack
        return bool(np.all(self.polytope.contains(pts, slack=s)))

    def smooth_window(self, inner_gap=2.0, outer_gap=0.75):
        """C-infinity plateau window: identically 1 for |x_k| <= L-inner_gap,
        identically 0 for |x_k| >= L-outer_gap, smooth in between.

        Perturbations and flow updates are multiplied by this window so the
        potential stays exactly equal to its closed-form tail in a boundary
        collar: a hard cutoff at the pinned layers would plant a kink whose
        second difference, though absolutely tiny, is comparable to the
        exponentially degenerate tail Hessian.
        """
        key = ("window", float(inner_gap), float(outer_gap))
        if getattr(self, "_window_cache", None) is None:
            self._window_cache = {}
        if key in self._window_cache:
            return self._window_cache[key]

        def smoothstep(u):
            u = np.clip(u, 0.0, 1.0)
            with np.errstate(divide="ignore", over="ignore"):
                f = np.where(u > 0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
                g = np.where(u < 1, np.exp(-1.0 / np.maximum(1.0 - u, 1e-300)),
                             0.0)
            return f / (f + g)

        w = np.ones((self.res,) * self.dim)
        for k, xk in enumerate(np.meshgrid(*self.axes, indexing="ij")):
            u = (self.L - outer_gap - np.abs(xk)) / (inner_gap - outer_gap)
            w = w * smoothstep(u)
        self._window_cache[key] = w
        return w

    def boundary_mask(self, layers=2):
        n = self.dim
        mask = np.zeros((self.res,) * n, dtype=bool)
        for axis in range(n):
            idx = [slice(None)] * n
            idx[axis] = slice(0, layers)
            mask[tuple(idx)] = True
            idx[axis] = slice(self.res - layers, self.res)
            mask[tuple(idx)] = True
        return mask

    def pinning_error(self, values=None):
        v = self.values if values is None else values
        diff = np.abs(v - self.tail_fields()["values"])
        mask = self.boundary_mask(2)
        return float(np.max(diff[mask])) if mask.any() else 0.0

    def validate(self, values=None, pin_tol=1e-8):
        v = self.values if values is None else values
        if not np.all(np.isfinite(v)):
            raise GridError("potential has non-finite values")
        if not self.convexity_ok(v):
            raise GridError("convexity lost")
        if not self.containment_ok(v):
            raise GridError("moment-map containment violated")
        if self.pinning_error(v) > pin_tol:
            raise GridError("boundary pinning violated: |psi - psi_ref| = %.2e"
                            % self.pinning_error(v))
        return True

    def with_values(self, values, validate=False):
        g = PotentialGrid.__new__(PotentialGrid)
        g.polytope = self.polytope
        g.L = self.L
        g.res = self.res
        g.values = np.asarray(values, dtype=float)
        g.tail = self.tail
        g.axes = self.axes
        g.spacing = self.spacing
        g.cell_volume = self.cell_volume
        g._d1 = self._d1
        g._d2 = self._d2
        g._phi = None
        g._window_cache = getattr(self, "_window_cache", None)
        if g.values.shape != self.values.shape:
            raise GridError("with_values: shape mismatch")
        if validate:
            g.validate()
        return g

    def pin(self, values):
        """Overwrite the outer two layers with exact tail values."""
        out = np.array(values, dtype=float)
        ref = self.tail_fields()["values"]
        mask = self.boundary_mask(2)
        out[mask] = ref[mask]
        return out

    def to_document(self):
        from .util import encode_array
        return {"polytope": self.polytope.to_document(),
                "L": self.L, "res": self.res,
                "tail": self.tail.to_document(),
                "psi": encode_array(self.values)}

    @classmethod
    def from_document(cls, doc):
        from .util import decode_array
        poly = pt.load_polytope(doc["polytope"])
        return cls(poly, float(doc["L"]), int(doc["res"]),
                   decode_array(doc["psi"]),
                   ReferencePotential.from_document(doc["tail"]))


def boundary_margin(poly, L, res):
    """min over boundary nodes of max_v <x, v>: controls every tail decay."""
    n = poly.dim
    axes = [np.linspace(-L, L, res)] * n
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mask = np.zeros((res,) * n, dtype=bool)
    for axis in range(n):
        idx = [slice(None)] * n
        idx[axis] = 0
        mask[tuple(idx)] = True
        idx[axis] = res - 1
        mask[tuple(idx)] = True
    z = pts[mask] @ poly.vertices_float.T
    return float(np.min(np.max(z, axis=-1)))


def _build(poly, ref, L, res, min_margin=10.0):
    if res < 16:
        raise GridError("resolution %d rejected (minimum 16)" % res)
    if boundary_margin(poly, L, res) < min_margin:
        raise GridError("box too small: dominant boundary exponent below "
                        "e^{%g}" % min_margin)
    grid = PotentialGrid(poly, float(L), int(res),
                         np.zeros((res,) * poly.dim), ref)
    grid.values = ref.grid_fields(grid)["values"].copy()
    grid._phi = None
    grid.validate()
    return grid


def reference_potential(poly, L, res):
    """Background potential psi_0 = log sum_vertices e^{<x,v>} on the grid."""
    return _build(poly, vertex_reference(poly), L, res)


def canonical_potential(poly, L, res):
    """Smooth lattice-weighted potential (round where a round metric exists)."""
    return _build(poly, canonical_reference(poly), L, res)


def project_convex(grid, bump, amplitude, max_halvings=25):
    """Largest t <= amplitude (by halving) with psi + t * bump a valid grid;
    bump is tapered to exact zero in the boundary collar first."""
    bump = np.asarray(bump, dtype=float) * grid.smooth_window()
    t = float(amplitude)
    for _ in range(max_halvings):
        vals = grid.values + t * bump
        if grid.convexity_ok(vals) and grid.containment_ok(vals):
            return grid.with_values(vals), t
        t *= 0.5
    raise GridError("perturbation could not be projected to convexity")


def perturbation_profile(grid, profile, seed=0, center=None, width=1.5):
    """Named bump profiles used by flow configs: sech, gauss, random_bumps."""
    X = grid.mesh()
    n = grid.dim
    if center is None:
        center = [0.0] * n
    if profile == "sech":
        out = np.ones_like(grid.values)
        for k in range(n):
            out = out / np.cosh((X[k] - center[k]) / width)
        return out
    if profile == "gauss":
        r2 = sum((X[k] - center[k]) ** 2 for k in range(n))
        return np.exp(-0.5 * r2 / width**2)
    if profile == "random_bumps":
        rng = np.random.default_rng(seed)
        out = np.zeros_like(grid.values)
        for _ in range(4):
            c = rng.uniform(-grid.L / 3, grid.L / 3, size=n)
            w = rng.uniform(0.8, 2.0)
            amp = rng.uniform(-1.0, 1.0)
            r2 = sum((X[k] - c[k]) ** 2 for k in range(n))
            out += amp * np.exp(-0.5 * r2 / w**2)
        return out
    raise GridError("unknown perturbation profile %r" % profile)

"""Reflexive moment polytopes of toric Fanos and exact exponential quadrature.

A polytope is kept in the anticanonical normalization

    Delta = { y : <y, nu> >= -1  for every facet normal nu },

so the origin is interior, all facet offsets are -1, and the metric-side
volume identity reads V = n! (2 pi)^n Vol(Delta).  Construction runs in exact
rational arithmetic (fractions.Fraction); floating point enters only in the
quadrature layer.

Integrals of exp(<b, y>) and its first two moments over Delta reduce, per
simplex of the decomposition with apex at the origin, to divided differences
of exp at the node values z_i = <b, v_i>.  Divided differences are evaluated
through the Opitz identity dd[z_0..z_k] exp = expm(B)[0, k] with B the
bidiagonal matrix carrying the nodes; this is uniformly stable, including
for clustered or coincident nodes, so no series fallback is needed.
"""

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import expm

from .util import reduce_sum


class PolytopeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# exact rational linear algebra (tiny systems, n <= 3)

def _solve_fraction(A, rhs):
    """Solve A y = rhs over the rationals; None if singular."""
    n = len(rhs)
    M = [list(row) + [r] for row, r in zip(A, rhs)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            return None
        M[col], M[piv] = M[piv], M[col]
        inv = Fraction(1, 1) / M[col][col]
        M[col] = [x * inv for x in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return tuple(row[n] for row in M)


def _as_fraction_vector(vec, dim, what):
    if len(vec) != dim:
        raise PolytopeError("%s has wrong length %d (dim=%d)" % (what, len(vec), dim))
    out = []
    for x in vec:
        if isinstance(x, str):
            out.append(Fraction(x))
        elif isinstance(x, (int, Fraction)):
            out.append(Fraction(x))
        elif isinstance(x, float):
            f = Fraction(x).limit_denominator(10**9)
            if abs(float(f) - x) > 1e-12:
                raise PolytopeError("%s entry %r is not rational enough" % (what, x))
            out.append(f)
        else:
            raise PolytopeError("%s entry %r not understood" % (what, x))
    return tuple(out)


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Polytope:
    """Reflexive moment polytope: H-rep, V-rep and an origin-apex fan."""

    name: str
    dim: int
    facet_normals: tuple          # tuple of integer n-vectors (offsets all -1)
    vertices: tuple               # tuple of Fraction n-vectors
    simplices: tuple              # tuple of vertex-index tuples, apex = origin

    def __post_init__(self):
        object.__setattr__(self, "_vertices_float",
                           np.array([[float(c) for c in v] for v in self.vertices]))

    @property
    def vertices_float(self):
        return self._vertices_float

    def simplex_vertex_arrays(self):
        """Float (k, n, n) array: simplex k spanned by origin and rows of [k]."""
        return np.array([[self._vertices_float[i] for i in s] for s in self.simplices])

    def simplex_volumes(self):
        vols = []
        for s in self.simplices:
            mat = [list(self.vertices[i]) for i in s]
            vols.append(abs(_det_fraction(mat)) / _factorial(self.dim))
        return vols

    def volume(self):
        """Exact rational Vol(Delta)."""
        return sum(self.simplex_volumes(), Fraction(0))

    def volume_float(self):
        return float(self.volume())

    def manifold_volume(self):
        """V = n! (2 pi)^n Vol(Delta) = (2 pi)^n int c_1^n."""
        return _factorial(self.dim) * (2.0 * np.pi) ** self.dim * self.volume_float()

    def contains(self, points, slack=0.0):
        """Vectorized membership <y, nu> >= -1 - slack for float points."""
        pts = np.asarray(points, dtype=float)
        nus = np.array([[float(c) for c in nu] for nu in self.facet_normals])
        vals = pts @ nus.T
        return np.all(vals >= -1.0 - slack, axis=-1)

    def facet_values(self, points):
        pts = np.asarray(points, dtype=float)
        nus = np.array([[float(c) for c in nu] for nu in self.facet_normals])
        return pts @ nus.T

    def lattice_points(self):
        """All integer points of Delta (bounded search inside the vertex box)."""
        lo = [int(np.floor(min(float(v[i]) for v in self.vertices))) for i in range(self.dim)]
        hi = [int(np.ceil(max(float(v[i]) for v in self.vertices))) for i in range(self.dim)]
        pts = []
        for cand in itertools.product(*[range(a, b + 1) for a, b in zip(lo, hi)]):
            ok = all(sum(Fraction(c) * nu_i for c, nu_i in zip(cand, nu)) >= -1
                     for nu in self.facet_normals)
            if ok:
                pts.append(tuple(cand))
        return pts

    def to_document(self):
        """Canonicalized structured-text form (facets and vertices sorted)."""
        facets = sorted([int(c) for c in nu] for nu in self.facet_normals)
        verts = sorted([_frac_str(c) for c in v] for v in self.vertices)
        return {"name": self.name, "dim": self.dim,
                "facet_normals": facets, "vertices": verts}


def _factorial(n):
    out = 1
    for k in range(2, n + 1):
        out *= k
    return out


def _det_fraction(rows):
    n = len(rows)
    M = [list(r) for r in rows]
    det = Fraction(1)
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            M[col], M[piv] = M[piv], M[col]
            det = -det
        det *= M[col][col]
        inv = Fraction(1) / M[col][col]
        for r in range(col + 1, n):
            f = M[r][col] * inv
            if f != 0:
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return det


def _frac_str(x):
    x = Fraction(x)
    return str(x.numerator) if x.denominator == 1 else "%d/%d" % (x.numerator, x.denominator)


# ---------------------------------------------------------------------------
# construction

def _vertices_from_facets(normals, dim):
    verts = set()
    minus_one = Fraction(-1)
    for combo in itertools.combinations(range(len(normals)), dim):
        A = [normals[i] for i in combo]
        y = _solve_fraction(A, [minus_one] * dim)
        if y is None:
            continue
        if all(sum(c * n_i for c, n_i in zip(y, nu)) >= minus_one for nu in normals):
            verts.add(tuple(y))
    return sorted(verts)


def _facets_from_vertices(vertices, dim):
    """Supporting hyperplanes of conv(vertices), normalized to offset -1."""
    facets = set()
    for combo in itertools.combinations(range(len(vertices)), dim):
        pts = [vertices[i] for i in combo]
        # hyperplane <y, a> = c through the points; solve with c fixed to 1,
        # retry c = 0 handled below (plane through origin is never a facet
        # of a Fano polytope).
        a = _solve_fraction(pts, [Fraction(1)] * dim)
        if a is None:
            continue
        vals = [sum(c * a_i for c, a_i in zip(v, a)) for v in vertices]
        if all(v <= 1 for v in vals):
            side = -1
        elif all(v >= 1 for v in vals):
            side = 1
        else:
            continue
        # orient inequality as <y, nu> >= -1 with nu = -side-normalized a
        if side == -1:
            nu = tuple(-c for c in a)
        else:
            # all vertices on the far side: origin outside this halfspace
            raise PolytopeError("not Fano-anticanonical: origin is not interior")
        if any(c.denominator != 1 for c in nu):
            raise PolytopeError("not Fano-anticanonical: facet %s has non-integer "
                                "normal at offset -1" % (nu,))
        facets.add(tuple(Fraction(c) for c in nu))
    return sorted(facets)


def _fan_simplices(polytope_vertices, normals, dim):
    """Decompose Delta into simplices with apex at the origin, one batch per
    facet; each facet is triangulated by a fan from its first vertex."""
    verts = polytope_vertices
    simplices = []
    for nu in normals:
        on = [i for i, v in enumerate(verts)
              if sum(c * n_i for c, n_i in zip(v, nu)) == -1]
        if len(on) < dim:
            raise PolytopeError("representation mismatch: facet %s touches only "
                                "%d vertices" % (nu, len(on)))
        if dim == 1:
            simplices.append((on[0],))
        elif dim == 2:
            # order the two (or more, collinear-impossible) endpoints
            if len(on) != 2:
                raise PolytopeError("representation mismatch: 2-D facet with "
                                    "%d vertices" % len(on))
            simplices.append(tuple(on))
        else:  # dim == 3: sort the facet polygon by angle, fan from first
            pts = np.array([[float(c) for c in verts[i]] for i in on])
            center = pts.mean(axis=0)
            nu_f = np.array([float(c) for c in nu], dtype=float)
            # basis of the facet plane
            e1 = pts[0] - center
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(nu_f, e1)
            e2 /= np.linalg.norm(e2)
            ang = np.arctan2((pts - center) @ e2, (pts - center) @ e1)
            order = [on[k] for k in np.argsort(ang)]
            for a, b in zip(order[1:-1], order[2:]):
                simplices.append((order[0], a, b))
    return tuple(simplices)


def build_polytope(name, dim, facet_normals=None, vertices=None):
    if dim < 1:
        raise PolytopeError("dim must be >= 1")
    if dim > 3:
        raise PolytopeError("dimensions n > 3 are out of scope")
    if facet_normals is None and vertices is None:
        raise PolytopeError("need facet_normals or vertices")

    if facet_normals is not None:
        normals = tuple(_as_fraction_vector(nu, dim, "facet normal")
                        for nu in facet_normals)
        for nu in normals:
            if any(c.denominator != 1 for c in nu):
                raise PolytopeError("facet normals must be integer vectors")
        verts = tuple(tuple(v) for v in _vertices_from_facets(normals, dim))
        if len(verts) < dim + 1:
            raise PolytopeError("representation mismatch: facet system is "
                                "unbounded or lower-dimensional")
        if vertices is not None:
            given = sorted(_as_fraction_vector(v, dim, "vertex") for v in vertices)
            if list(given) != list(verts):
                raise PolytopeError("representation mismatch: supplied vertices "
                                    "disagree with facet intersection")
    else:
        vset = sorted({_as_fraction_vector(v, dim, "vertex") for v in vertices})
        normals = tuple(_facets_from_vertices(vset, dim))
        if not normals:
            raise PolytopeError("representation mismatch: vertex set is "
                                "lower-dimensional")
        # keep only actual vertices of the hull
        verts = tuple(tuple(v) for v in _vertices_from_facets(normals, dim))
        if sorted(verts) != list(vset):
            raise PolytopeError("representation mismatch: input points are not "
                                "the vertex set of their hull")

    simplices = _fan_simplices(verts, normals, dim)
    poly = Polytope(name=name, dim=dim, facet_normals=normals,
                    vertices=verts, simplices=simplices)
    _validate(poly)
    return poly


def _validate(poly):
    # fan covers Delta: rational simplex volumes against the divergence-form
    # volume (1/n) sum_facets dist(0, facet) * area is implicit in the fan;
    # cross-check instead that every vertex saturates >= dim facets and the
    # fan volume is positive.
    vol = poly.volume()
    if vol <= 0:
        raise PolytopeError("representation mismatch: zero volume")
    for v in poly.vertices:
        active = sum(1 for nu in poly.facet_normals
                     if sum(c * n_i for c, n_i in zip(v, nu)) == -1)
        if active < poly.dim:
            raise PolytopeError("representation mismatch: vertex %s is not a "
                                "vertex of the facet system" % (v,))


# ---------------------------------------------------------------------------
# catalog and document loading

_CATALOG_DATA = {
    "cp1": {"dim": 1, "facet_normals": [[1], [-1]]},
    "cp2": {"dim": 2, "facet_normals": [[1, 0], [0, 1], [-1, -1]]},
    "cp1xcp1": {"dim": 2, "facet_normals": [[1, 0], [-1, 0], [0, 1], [0, -1]]},
    "bl1cp2": {"dim": 2, "facet_normals": [[1, 0], [0, 1], [-1, -1], [1, 1]]},
}


def catalog_names():
    return sorted(_CATALOG_DATA)


def catalog(name):
    key = name.lower()
    if key not in _CATALOG_DATA:
        raise PolytopeError("unknown catalog polytope %r (have %s)"
                            % (name, ", ".join(catalog_names())))
    data = _CATALOG_DATA[key]
    return build_polytope(key, data["dim"], facet_normals=data["facet_normals"])


def load_polytope(document):
    """Build a validated Polytope from a document (dict, JSON text, or
    'catalog:NAME')."""
    if isinstance(document, Polytope):
        return document
    if isinstance(document, str):
        doc = document.strip()
        if doc.startswith("catalog:"):
            return catalog(doc.split(":", 1)[1])
        import json
        document = json.loads(doc)
    if not isinstance(document, dict):
        raise PolytopeError("polytope document must be a mapping")
    if "name" not in document or "dim" not in document:
        raise PolytopeError("polytope document needs 'name' and 'dim'")
    return build_polytope(str(document["name"]), int(document["dim"]),
                          facet_normals=document.get("facet_normals"),
                          vertices=document.get("vertices"))


def polytope_volume(poly):
    """(Vol(Delta), V) with V = n! (2 pi)^n Vol(Delta)."""
    vol = poly.volume_float()
    return vol, _factorial(poly.dim) * (2.0 * np.pi) ** poly.dim * vol


# ---------------------------------------------------------------------------
# exponential-affine quadrature

@dataclass
class MomentIntegralReport:
    """Integrals of e^{<b,y>} dy over Delta: value, first and second moments.

    True values are (field) * exp(log_scale); log_scale is nonzero only when
    the unscaled integrals would overflow.
    """

    phi: float
    grad: np.ndarray
    hess: np.ndarray
    linear_weighted: float
    log_scale: float = 0.0


def exp_divided_difference(nodes):
    """Divided difference of exp over the node multiset, via the Opitz
    bidiagonal matrix exponential; nodes may repeat."""
    z = np.sort(np.asarray(nodes, dtype=float))
    k = z.size
    if k == 1:
        return float(np.exp(z[0]))
    B = np.diag(z) + np.diag(np.ones(k - 1), 1)
    return float(expm(B)[0, -1])


def weighted_moment_integrals(poly, b):
    """phi = int e^{<b,y>}, grad = int y e^{<b,y>}, hess = int y y^T e^{<b,y>},
    linear_weighted = int <b,y> e^{<b,y>}, all over Delta.

    Exact per simplex (divided differences of exp); relative accuracy ~1e-13.
    """
    n = poly.dim
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise ValueError("b must be an n-vector")
    if not np.all(np.isfinite(b)):
        raise ValueError("b must be finite")

    simplex_verts = poly.simplex_vertex_arrays()          # (k, n, n)
    vols = np.array([float(v) for v in poly.simplex_volumes()])
    zmax = float(np.max(simplex_verts @ b)) if simplex_verts.size else 0.0
    # rescale so the largest node is 0; decide at the end whether the
    # prefactor e^{zmax} fits in double range
    shift = max(zmax, 0.0)

    fact = float(_factorial(n))
    phi = 0.0
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    for verts, vol in zip(simplex_verts, vols):
        # node multiset: origin plus the n spanning vertices
        z = np.concatenate([[0.0], verts @ b]) - shift
        w = fact * vol
        phi += w * exp_divided_difference(z)
        for i in range(n + 1):
            vi = np.zeros(n) if i == 0 else verts[i - 1]
            if i > 0:
                grad += w * vi * exp_divided_difference(np.append(z, z[i]))
            for j in range(i, n + 1):
                if i == 0 or j == 0:
                    continue
                vj = verts[j - 1]
                dd = exp_divided_difference(np.concatenate([z, [z[i], z[j]]]))
                coeff = 2.0 if i == j else 1.0
                block = coeff * w * dd * np.outer(vi, vj)
                hess += block if i == j else block + block.T

    if shift != 0.0 and shift < 650.0:
        scale = np.exp(shift)
        phi *= scale
        grad *= scale
        hess *= scale
        log_scale = 0.0
    else:
        log_scale = shift
    lin = float(b @ grad)
    return MomentIntegralReport(phi=phi, grad=grad, hess=(hess + hess.T) / 2.0,
                                linear_weighted=lin, log_scale=log_scale)


def log_phi(poly, b):
    """log int_Delta e^{<b,y>} dy, overflow-safe."""
    rep = weighted_moment_integrals(poly, b)
    return float(np.log(rep.phi) + rep.log_scale)


# ---------------------------------------------------------------------------
# oracles used by the test-suite (independent of the closed forms above)

def rasterized_volume(poly, resolution=512):
    """Brute-force H-rep volume by grid rasterization (n <= 2)."""
    n = poly.dim
    if n > 2:
        raise ValueError("rasterized volume oracle only for n <= 2")
    vmax = float(np.max(np.abs(poly.vertices_float))) + 0.5
    axes = [np.linspace(-vmax, vmax, resolution) for _ in range(n)]
    cell = (2.0 * vmax / (resolution - 1)) ** n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    inside = poly.contains(grid)
    return reduce_sum(inside.astype(float)) * cell


def monte_carlo_moments(poly, b, samples=10**6, seed=0):
    """Monte-Carlo (phi, grad) oracle: uniform sampling per simplex via
    Dirichlet weights.  Returns estimates and standard errors."""
    rng = np.random.default_rng(seed)
    n = poly.dim
    simplex_verts = poly.simplex_vertex_arrays()
    vols = np.array([float(v) for v in poly.simplex_volumes()])
    total = vols.sum()
    phi_est = 0.0
    phi_var = 0.0
    grad_est = np.zeros(n)
    grad_var = np.zeros(n)
    for verts, vol in zip(simplex_verts, vols):
        m = max(1, int(round(samples * vol / total)))
        wts = rng.dirichlet(np.ones(n + 1), size=m)
        pts = wts[:, 1:] @ verts            # apex contributes zero coordinate
        f = np.exp(pts @ np.asarray(b, dtype=float))
        phi_est += vol * f.mean()
        phi_var += vol**2 * f.var(ddof=1) / m
        yf = pts * f[:, None]
        grad_est += vol * yf.mean(axis=0)
        grad_var += vol**2 * yf.var(axis=0, ddof=1) / m
    return phi_est, np.sqrt(phi_var), grad_est, np.sqrt(grad_var)

"""
Conforming triangular meshes with newest-vertex bisection.

Cells are stored as vertex triples ``(v0, v1, v2)`` in counter-clockwise
order. The refinement edge of a cell is always the edge opposite its first
vertex, i.e. ``(v1, v2)``; ``v0`` plays the role of the "newest vertex".
Local edge ``i`` of a cell is the edge opposite local vertex ``i``.

Meshes are immutable. :func:`bisect` returns a new mesh together with the
map from new cells to their parent cell in the input mesh.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse


class MeshError(ValueError):
    """Raised for invalid mesh data (orientation, conformity, format)."""


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _signed_area(vertices, cells):
    p0 = vertices[cells[:, 0]]
    e1 = vertices[cells[:, 1]] - p0
    e2 = vertices[cells[:, 2]] - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def tag_longest_edge(vertices, cells):
    """Rotate each cell cyclically so that its longest edge is ``(v1, v2)``.

    Cyclic rotation keeps the orientation. Ties are broken by the lowest
    local index, which makes the tagging deterministic.
    """
    vertices = np.asarray(vertices, dtype=float)
    cells = np.asarray(cells, dtype=np.int64)
    lengths = np.empty(cells.shape, dtype=float)
    for i in range(3):
        a = vertices[cells[:, (i + 1) % 3]]
        b = vertices[cells[:, (i + 2) % 3]]
        lengths[:, i] = np.hypot(*(a - b).T)
    shift = np.argmax(lengths - 1e-12 * np.arange(3), axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(cells, idx, axis=1)


class TriMesh:
    """
    Conforming triangulation of a polygonal domain.

    Parameters
    ----------
    vertices : array_like, shape (nv, 2)
        Vertex coordinates.
    cells : array_like, shape (nc, 3)
        Counter-clockwise vertex triples; the refinement edge of a cell is
        the one opposite its first vertex.
    generation : array_like, shape (nc,), optional
        Bisection depth of each cell (zero for an initial mesh).
    validate : bool
        Check orientation and edge incidence on construction.

    Attributes
    ----------
    edges : ndarray, shape (ne, 2)
        Sorted vertex pairs.
    edge_cells : ndarray, shape (ne, 2)
        Incident cells, ``-1`` in the second column for boundary edges.
    edge_local : ndarray, shape (ne, 2)
        Local edge index of the edge inside each incident cell.
    cell_edges : ndarray, shape (nc, 3)
        Global edge id of local edge ``i`` (opposite vertex ``i``).
    boundary : ndarray of bool, shape (ne,)
        True for edges with a single incident cell.
    """

    def __init__(self, vertices, cells, generation=None, validate=True):
        self.vertices = _frozen(vertices, float)
        self.cells = _frozen(cells, np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must have shape (nc, 3)")
        if len(self.cells) == 0:
            raise MeshError("mesh has no cells")
        if self.cells.min() < 0 or self.cells.max() >= len(self.vertices):
            raise MeshError("cell vertex index out of range")
        if generation is None:
            generation = np.zeros(len(self.cells), dtype=np.int64)
        self.generation = _frozen(generation, np.int64)
        self._build_edges()
        if validate:
            self.check()

    def _build_edges(self):
        c = self.cells
        nc = len(c)
        local = np.stack([c[:, [1, 2]], c[:, [2, 0]], c[:, [0, 1]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        keys = pairs[:, 0] * len(self.vertices) + pairs[:, 1]
        ukeys, first, inverse = np.unique(keys, return_index=True,
                                          return_inverse=True)
        counts = np.bincount(inverse, minlength=len(ukeys))
        if counts.max() > 2:
            bad = int(np.argmax(counts))
            raise MeshError(f"edge {pairs[first[bad]].tolist()} shared by "
                            f"{counts[bad]} cells")
        ne = len(ukeys)
        owner = np.repeat(np.arange(nc), 3)
        loc = np.tile(np.arange(3), nc)
        edge_cells = -np.ones((ne, 2), dtype=np.int64)
        edge_local = -np.ones((ne, 2), dtype=np.int64)
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        slot = np.zeros(len(order), dtype=np.int64)
        slot[1:] = inv_sorted[1:] == inv_sorted[:-1]
        edge_cells[inv_sorted, slot] = owner[order]
        edge_local[inv_sorted, slot] = loc[order]
        self.edges = _frozen(pairs[first], np.int64)
        self.edge_cells = _frozen(edge_cells, np.int64)
        self.edge_local = _frozen(edge_local, np.int64)
        self.cell_edges = _frozen(inverse.reshape(nc, 3), np.int64)
        self.boundary = _frozen(counts == 1, bool)

    # -- sizes -----------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return len(self.edges)

    # -- geometry --------------------------------------------------------
    @cached_property
    def signed_areas(self):
        return _frozen(_signed_area(self.vertices, self.cells), float)

    @cached_property
    def areas(self):
        return _frozen(np.abs(self.signed_areas), float)

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return _frozen(np.hypot(d[:, 0], d[:, 1]), float)

    @cached_property
    def diameters(self):
        """Cell diameters ``h_K`` (longest edge)."""
        return _frozen(self.edge_lengths[self.cell_edges].max(axis=1), float)

    @cached_property
    def inradii(self):
        perimeter = self.edge_lengths[self.cell_edges].sum(axis=1)
        return _frozen(2.0 * self.areas / perimeter, float)

    @cached_property
    def centroids(self):
        return _frozen(self.vertices[self.cells].mean(axis=1), float)

    @cached_property
    def grad_lambda(self):
        """Gradients of the barycentric coordinates, shape (nc, 3, 2)."""
        p = self.vertices[self.cells]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        jinv = np.linalg.inv(jac)
        g = np.empty((self.n_cells, 3, 2))
        g[:, 1] = jinv[:, 0, :]
        g[:, 2] = jinv[:, 1, :]
        g[:, 0] = -g[:, 1] - g[:, 2]
        return _frozen(g, float)

    @property
    def h_max(self):
        return float(self.diameters.max())

    def shape_regularity(self):
        """Return ``max_K h_K / rho_K``."""
        return float(np.max(self.diameters / self.inradii))

    def to_physical(self, bary, cells=None):
        """Map barycentric points to physical coordinates.

        ``bary`` has shape (nq, 3) (same points in every cell) or
        (nc, nq, 3). Returns an array of shape (nc, nq, 2).
        """
        p = self.vertices[self.cells if cells is None else self.cells[cells]]
        bary = np.asarray(bary, dtype=float)
        if bary.ndim == 2:
            return np.einsum("qk,ckd->cqd", bary, p)
        return np.einsum("cqk,ckd->cqd", bary, p)

    @cached_property
    def boundary_vertices(self):
        return _frozen(np.unique(self.edges[self.boundary]), np.int64)

    @property
    def domain_area(self):
        return float(self.areas.sum())

    # -- audits ----------------------------------------------------------
    def check(self):
        """Validate orientation, edge incidence, and absence of hanging vertices."""
        if np.any(self.signed_areas <= 0.0):
            k = int(np.argmin(self.signed_areas))
            raise MeshError(f"cell {k} is not positively oriented")
        self.check_conformity()

    def check_conformity(self):
        counts = (self.edge_cells >= 0).sum(axis=1)
        if np.any((counts < 1) | (counts > 2)):
            raise MeshError("edge incidence outside {1, 2}")
        if np.any((counts == 1) != self.boundary):
            raise MeshError("boundary flags inconsistent with incidence")
        hanging = self.hanging_vertices()
        if len(hanging):
            raise MeshError(f"hanging vertices {hanging[:5].tolist()}")

    def hanging_vertices(self):
        """Vertices lying strictly inside a boundary edge.

        In a conforming mesh no vertex lies in the relative interior of an
        edge with a single incident cell.
        """
        bedges = self.edges[self.boundary]
        a = self.vertices[bedges[:, 0]]
        b = self.vertices[bedges[:, 1]]
        lo = np.minimum(a, b) - 1e-12
        hi = np.maximum(a, b) + 1e-12
        found = []
        # bucket vertices by x to keep the scan roughly linear
        order = np.argsort(self.vertices[:, 0])
        xs = self.vertices[order, 0]
        starts = np.searchsorted(xs, lo[:, 0], side="left")
        stops = np.searchsorted(xs, hi[:, 0], side="right")
        for e in range(len(bedges)):
            cand = order[starts[e]:stops[e]]
            if len(cand) <= 2:
                continue
            q = self.vertices[cand]
            inside = np.all((q >= lo[e]) & (q <= hi[e]), axis=1)
            inside &= (cand != bedges[e, 0]) & (cand != bedges[e, 1])
            if not inside.any():
                continue
            d = b[e] - a[e]
            r = q[inside] - a[e]
            cross = np.abs(d[0] * r[:, 1] - d[1] * r[:, 0])
            tol = 1e-10 * float(np.dot(d, d))
            found.extend(cand[inside][cross <= tol].tolist())
        return np.unique(np.asarray(found, dtype=np.int64))

    def __repr__(self):
        return (f"TriMesh(nv={self.n_vertices}, nc={self.n_cells}, "
                f"ne={self.n_edges})")


@dataclass(frozen=True)
class PatchIndex:
    """Element patches.

    ``edge_patch[K]`` holds the cells sharing an edge with ``K`` (``K``
    included); ``vertex_patch[K]`` holds the cells sharing at least a vertex
    with ``K``. Both are stored as boolean CSR adjacency matrices.
    """

    edge_patch: sparse.csr_matrix
    vertex_patch: sparse.csr_matrix

    def edge_neighbors(self, k):
        row = self.edge_patch
        return row.indices[row.indptr[k]:row.indptr[k + 1]]

    def vertex_neighbors(self, k):
        row = self.vertex_patch
        return row.indices[row.indptr[k]:row.indptr[k + 1]]


def compute_patches(mesh):
    nc = mesh.n_cells
    interior = ~mesh.boundary
    i, j = mesh.edge_cells[interior].T
    diag = np.arange(nc)
    rows = np.concatenate([diag, i, j])
    cols = np.concatenate([diag, j, i])
    edge_patch = sparse.csr_matrix(
        (np.ones(len(rows), dtype=bool), (rows, cols)), shape=(nc, nc))
    inc = sparse.csr_matrix(
        (np.ones(3 * nc), (np.repeat(diag, 3), mesh.cells.ravel())),
        shape=(nc, mesh.n_vertices))
    vertex_patch = (inc @ inc.T).astype(bool).tocsr()
    edge_patch.sort_indices()
    vertex_patch.sort_indices()
    return PatchIndex(edge_patch, vertex_patch)


def build_unit_square(n):
    """Uniform mesh of (0, 1)^2 with ``2 n^2`` cells."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("subdivision count must be a positive integer")
    t = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(t, t, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    cells = np.empty((2 * n * n, 3), dtype=np.int64)
    cells[0::2] = np.column_stack([v00, v10, v11])
    cells[1::2] = np.column_stack([v00, v11, v01])
    return TriMesh(vertices, tag_longest_edge(vertices, cells))


def build_lshape():
    """Coarse mesh of (-1, 1)^2 minus [0, 1] x [-1, 0] with six cells.

    Each unit square is split along the diagonal through the reentrant
    corner at the origin.
    """
    vertices = np.array([
        [-1.0, -1.0], [0.0, -1.0], [-1.0, 0.0], [0.0, 0.0],
        [1.0, 0.0], [-1.0, 1.0], [0.0, 1.0], [1.0, 1.0],
    ])
    cells = np.array([
        [0, 1, 3], [0, 3, 2],
        [2, 3, 5], [3, 6, 5],
        [3, 4, 7], [3, 7, 6],
    ])
    return TriMesh(vertices, tag_longest_edge(vertices, cells))


def _close_marking(mesh, marked_edges):
    """Propagate edge marks until every cell with a marked edge has its
    refinement edge marked."""
    ref = mesh.cell_edges[:, 0]
    while True:
        has_mark = marked_edges[mesh.cell_edges].any(axis=1)
        need = has_mark & ~marked_edges[ref]
        if not need.any():
            return marked_edges
        marked_edges[ref[need]] = True


def bisect(mesh, marked):
    """Refine ``mesh`` by newest-vertex bisection.

    Every marked cell is bisected at least once; neighbours are refined as
    needed to keep the mesh conforming.

    Parameters
    ----------
    mesh : TriMesh
    marked : iterable of int
        Cell ids to refine.

    Returns
    -------
    new_mesh : TriMesh
    parent : ndarray, shape (new_nc,)
        Index of the cell of ``mesh`` each new cell descends from.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray)
                                  else marked, dtype=np.int64))
    if len(marked) == 0:
        return mesh, np.arange(mesh.n_cells)
    if marked.min() < 0 or marked.max() >= mesh.n_cells:
        raise ValueError("marked cell id out of range")

    nv = mesh.n_vertices
    marked_edges = np.zeros(mesh.n_edges, dtype=bool)
    marked_edges[mesh.cell_edges[marked, 0]] = True
    marked_edges = _close_marking(mesh, marked_edges)

    split = np.flatnonzero(marked_edges)
    mid_of_edge = -np.ones(mesh.n_edges, dtype=np.int64)
    mid_of_edge[split] = nv + np.arange(len(split))
    e = mesh.edges[split]
    new_vertices = np.vstack([mesh.vertices,
                              0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])])
    keys = e[:, 0] * nv + e[:, 1]

    def midpoint(b, c):
        lo, hi = np.minimum(b, c), np.maximum(b, c)
        ok = (lo < nv) & (hi < nv)
        k = np.where(ok, lo * nv + hi, -1)
        pos = np.searchsorted(keys, k)
        pos = np.clip(pos, 0, max(len(keys) - 1, 0))
        hit = ok & (keys[pos] == k)
        return np.where(hit, nv + pos, -1)

    cells = mesh.cells.copy()
    parent = np.arange(mesh.n_cells)
    gen = mesh.generation.copy()
    for _ in range(3):
        m = midpoint(cells[:, 1], cells[:, 2])
        hit = m >= 0
        if not hit.any():
            break
        a, b, c = cells[hit].T
        mm = m[hit]
        child1 = np.column_stack([mm, a, b])
        child2 = np.column_stack([mm, c, a])
        keep = ~hit
        cells = np.vstack([cells[keep], child1, child2])
        parent = np.concatenate([parent[keep], parent[hit], parent[hit]])
        gen = np.concatenate([gen[keep], gen[hit] + 1, gen[hit] + 1])
    # stable output ordering: by parent then by creation
    order = np.argsort(parent, kind="stable")
    new = TriMesh(new_vertices, cells[order], generation=gen[order],
                  validate=False)
    return new, parent[order]


def refine_uniform(mesh, times=1):
    """Bisect every cell twice per round (4x cells, h halved)."""
    for _ in range(times):
        for _ in range(2):
            mesh, _ = bisect(mesh, np.arange(mesh.n_cells))
    return mesh


# -- ASCII format ----------------------------------------------------------

def write_mesh(mesh, path):
    """Write ``nv nc`` then vertex coordinates then 0-based cell triples."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_cells}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for i, j, k in mesh.cells:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path, tag=True):
    """Read the ASCII mesh format; validates orientation and conformity.

    With ``tag=True`` the refinement edge of every cell is reset to its
    longest edge.
    """
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        nv, nc = int(tokens[0]), int(tokens[1])
        data = tokens[2:]
        if len(data) != 2 * nv + 3 * nc:
            raise MeshError(f"expected {2 * nv + 3 * nc} values after header, "
                            f"found {len(data)}")
        vertices = np.array(data[:2 * nv], dtype=float).reshape(nv, 2)
        cells = np.array(data[2 * nv:], dtype=np.int64).reshape(nc, 3)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"malformed mesh file {path}: {exc}") from exc
    if tag:
        cells = tag_longest_edge(vertices, cells)
    return TriMesh(vertices, cells)

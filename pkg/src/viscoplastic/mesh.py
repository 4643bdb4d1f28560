"""Triangulations of the unit-square cavity.

Three kinds of meshes appear in the solver:

* the structured coarse mesh (pressure grid), where every square of an
  ``n x n`` grid is cut by both diagonals into four triangles,
* the fine mesh (velocity / stress grid), obtained from a coarse mesh by
  connecting the edge midpoints of every triangle,
* locally refined coarse meshes produced by red-green refinement.

Meshes are plain containers of numpy arrays and are never modified after
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

BOUNDARY_TOL = 1e-12
TAGS = ("bottom", "right", "top", "left")

# local edge k of a triangle joins vertices _EDGE_LOCAL[k]
_EDGE_LOCAL = np.array([[0, 1], [1, 2], [2, 0]])


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Counter-clockwise triangulation of a subset of the plane."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def _edge_data(self):
        local = self.triangles[:, _EDGE_LOCAL]  # (nt, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        keys = pairs[:, 0] * self.n_vertices + pairs[:, 1]
        uniq, first, inverse, counts = np.unique(
            keys, return_index=True, return_inverse=True, return_counts=True)
        return pairs[first], inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, shape (n_edges, 2)."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """Edge index of local edge k of every triangle, shape (nt, 3)."""
        return self._edge_data[1]

    @property
    def edge_counts(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edges[self.edge_counts == 1]

    @cached_property
    def boundary_tags(self) -> np.ndarray:
        """Tag of every boundary edge: one of ``TAGS``; '' if not on the square."""
        mid = self.vertices[self.boundary_edges].mean(axis=1)
        tags = np.full(len(mid), "", dtype=object)
        tags[np.abs(mid[:, 0]) <= BOUNDARY_TOL] = "left"
        tags[np.abs(mid[:, 0] - 1.0) <= BOUNDARY_TOL] = "right"
        tags[np.abs(mid[:, 1]) <= BOUNDARY_TOL] = "bottom"
        tags[np.abs(mid[:, 1] - 1.0) <= BOUNDARY_TOL] = "top"
        return tags

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def min_angle(self) -> float:
        """Smallest interior angle of all triangles, in radians."""
        p = self.vertices[self.triangles]
        angles = []
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
        return float(np.min(angles))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class CoarseMesh(TriMesh):
    """Pressure mesh.

    ``green_id[t]`` is -1 for regular triangles; triangles created by green
    bisection point into ``green_parents``, the vertex triples of the
    triangles they were cut from.
    """

    generation: int = 0
    green_id: np.ndarray | None = None
    green_parents: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.green_id is None:
            object.__setattr__(self, "green_id", np.full(self.n_triangles, -1, dtype=np.int64))
        if self.green_parents is None:
            object.__setattr__(self, "green_parents", np.zeros((0, 3), dtype=np.int64))


@dataclass(frozen=True, eq=False)
class FineMesh(TriMesh):
    """Velocity mesh: the midpoint refinement of ``coarse``.

    The first ``coarse.n_vertices`` vertices coincide with the coarse ones;
    vertex ``coarse.n_vertices + i`` is the midpoint of ``coarse.edges[i]``.
    Children of coarse triangle ``c`` are ``4c .. 4c+3``.
    """

    coarse: CoarseMesh | None = None
    parent: np.ndarray | None = field(default=None)

    @property
    def generation(self) -> int:
        return self.coarse.generation


def build_structured_cavity(n: int) -> CoarseMesh:
    """Cut every cell of an ``n x n`` grid on [0,1]^2 into four triangles."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise MeshError(f"number of subdivisions must be a positive integer, got {n!r}")
    n = int(n)
    h = 1.0 / n
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    corners = np.column_stack([ii.ravel() * h, jj.ravel() * h])
    ci, cj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    centres = np.column_stack([(ci.ravel() + 0.5) * h, (cj.ravel() + 0.5) * h])
    vertices = np.vstack([corners, centres])

    i, j = ci.ravel(), cj.ravel()
    a = j * (n + 1) + i
    b = a + 1
    c = b + n + 1
    d = a + n + 1
    m = (n + 1) ** 2 + j * n + i
    tris = np.stack([
        np.column_stack([a, b, m]),
        np.column_stack([b, c, m]),
        np.column_stack([c, d, m]),
        np.column_stack([d, a, m]),
    ], axis=1).reshape(-1, 3)
    return CoarseMesh(vertices, tris)


def refine_midpoints(coarse: CoarseMesh) -> FineMesh:
    """Split every coarse triangle into four congruent children."""
    nv = coarse.n_vertices
    mids = coarse.vertices[coarse.edges].mean(axis=1)
    vertices = np.vstack([coarse.vertices, mids])
    te = coarse.triangle_edges + nv  # midpoints of local edges 01, 12, 20
    v = coarse.triangles
    children = np.stack([
        np.column_stack([v[:, 0], te[:, 0], te[:, 2]]),
        np.column_stack([te[:, 0], v[:, 1], te[:, 1]]),
        np.column_stack([te[:, 2], te[:, 1], v[:, 2]]),
        np.column_stack([te[:, 0], te[:, 1], te[:, 2]]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(coarse.n_triangles), 4)
    return FineMesh(vertices, children, coarse=coarse, parent=parent)


def check_conforming(mesh: TriMesh) -> None:
    """Raise MeshError unless ``mesh`` is a conforming triangulation of [0,1]^2."""
    if np.any(mesh.signed_areas <= 0):
        raise MeshError("triangle with non-positive signed area")
    counts = mesh.edge_counts
    if np.any(counts > 2):
        raise MeshError("edge shared by more than two triangles")
    if np.any(mesh.boundary_tags == ""):
        raise MeshError("edge with a single triangle lies inside the domain (hanging node)")
    # hanging nodes always sit at edge midpoints in this code base
    tree = cKDTree(mesh.vertices)
    mids = mesh.vertices[mesh.edges].mean(axis=1)
    dist, _ = tree.query(mids)
    lengths = np.linalg.norm(np.diff(mesh.vertices[mesh.edges], axis=1)[:, 0], axis=1)
    if np.any(dist < 1e-9 * lengths):
        raise MeshError("vertex located at the midpoint of an edge (hanging node)")
    if abs(mesh.areas.sum() - 1.0) > 1e-12:
        raise MeshError(f"triangles cover an area of {mesh.areas.sum()!r}, not 1")


def _coord_key(p) -> tuple:
    return (round(float(p[0]), 13), round(float(p[1]), 13))


def refine_marked(coarse: CoarseMesh, marks) -> CoarseMesh:
    """Red-green refinement of the marked triangles.

    Marked triangles are split into four (red). All green pairs of the input
    are first merged back into their parents, so green triangles are never
    refined further. A triangle with two or more split edges becomes red; with
    exactly one split edge it is bisected (green) only if that edge is its
    longest edge, otherwise it becomes red as well. This keeps every
    triangle similar to one of the input shapes or to a longest-edge
    bisection of them.
    """
    marks = {int(t) for t in marks}
    bad = [t for t in marks if t < 0 or t >= coarse.n_triangles]
    if bad:
        raise MeshError(f"marked triangle indices out of range: {sorted(bad)[:5]}")
    if not marks:
        return coarse

    verts = [tuple(p) for p in coarse.vertices.tolist()]
    lookup = {_coord_key(p): i for i, p in enumerate(verts)}

    # base triangulation with every green pair merged back into its parent
    base: list[tuple[int, int, int]] = []
    red: set[int] = set()
    parent_slot: dict[int, int] = {}
    for t, tri in enumerate(coarse.triangles.tolist()):
        g = int(coarse.green_id[t])
        if g < 0:
            if t in marks:
                red.add(len(base))
            base.append(tuple(tri))
        else:
            if g not in parent_slot:
                parent_slot[g] = len(base)
                base.append(tuple(int(x) for x in coarse.green_parents[g]))
            if t in marks:
                red.add(parent_slot[g])

    while True:
        tris, greens = _red_green_round(base, red, verts, lookup)
        base = [tuple(t) for t in tris]
        # merge the greens again so that the next round (if any) sees parents
        hanging = _has_hanging_edges(tris, verts, lookup)
        if not hanging:
            break
        merged: list[tuple[int, int, int]] = []
        seen: set[int] = set()
        for t, tri in enumerate(tris):
            g = greens[t]
            if g is None:
                merged.append(tri)
            elif g[0] not in seen:
                seen.add(g[0])
                merged.append(g[1])
        base = merged
        red = set()

    tri_arr = np.array(tris, dtype=np.int64)
    green_id = np.full(len(tris), -1, dtype=np.int64)
    parents: list[tuple[int, int, int]] = []
    gmap: dict[int, int] = {}
    for t, g in enumerate(greens):
        if g is not None:
            if g[0] not in gmap:
                gmap[g[0]] = len(parents)
                parents.append(g[1])
            green_id[t] = gmap[g[0]]

    vert_arr = np.array(verts, dtype=float)
    used = np.unique(tri_arr)
    if len(used) != len(vert_arr):
        remap = np.full(len(vert_arr), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        vert_arr = vert_arr[used]
        tri_arr = remap[tri_arr]
        parents = [tuple(remap[list(p)]) for p in parents]
    gp = np.array(parents, dtype=np.int64).reshape(-1, 3)
    return CoarseMesh(vert_arr, tri_arr, generation=coarse.generation + 1,
                      green_id=green_id, green_parents=gp)


def _midpoint_index(a, b, verts, lookup):
    pa, pb = verts[a], verts[b]
    return lookup.get(_coord_key(((pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2)))


def _edge_len2(a, b, verts):
    pa, pb = verts[a], verts[b]
    return (pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2


def _red_green_round(base, red, verts, lookup):
    used = {v for tri in base for v in tri}

    def existing_mid(a, b):
        m = _midpoint_index(a, b, verts, lookup)
        return m if (m is not None and m in used) else None

    split: set[tuple[int, int]] = set()
    red = set(red)
    for t, (a, b, c) in enumerate(base):
        for x, y in ((a, b), (b, c), (c, a)):
            m = existing_mid(x, y)
            if m is not None:
                split.add((min(x, y), max(x, y)))
                # a split half-edge means the neighbour is two levels finer
                if existing_mid(x, m) is not None or existing_mid(m, y) is not None:
                    red.add(t)
    for t in red:
        a, b, c = base[t]
        split.update({(min(a, b), max(a, b)), (min(b, c), max(b, c)), (min(c, a), max(c, a))})

    # edge -> triangles adjacency for the fixpoint sweep
    adjacency: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(base):
        for x, y in ((a, b), (b, c), (c, a)):
            adjacency.setdefault((min(x, y), max(x, y)), []).append(t)

    def needs_red(t):
        a, b, c = base[t]
        es = [(a, b), (b, c), (c, a)]
        flags = [(min(x, y), max(x, y)) in split for x, y in es]
        k = sum(flags)
        if k >= 2:
            return True
        if k == 1:
            lens = [_edge_len2(x, y, verts) for x, y in es]
            i = flags.index(True)
            return lens[i] < max(lens) * (1 - 1e-9)
        return False

    queue = list(range(len(base)))
    while queue:
        t = queue.pop()
        if t in red or not needs_red(t):
            continue
        red.add(t)
        a, b, c = base[t]
        for x, y in ((a, b), (b, c), (c, a)):
            e = (min(x, y), max(x, y))
            if e not in split:
                split.add(e)
                queue.extend(adjacency[e])

    def mid(x, y):
        m = _midpoint_index(x, y, verts, lookup)
        if m is None:
            px, py = verts[x], verts[y]
            p = ((px[0] + py[0]) / 2, (px[1] + py[1]) / 2)
            m = len(verts)
            verts.append(p)
            lookup[_coord_key(p)] = m
        return m

    tris: list[tuple[int, int, int]] = []
    greens: list = []
    for t, (a, b, c) in enumerate(base):
        if t in red:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
            greens += [None] * 4
            continue
        rot = [(a, b, c), (b, c, a), (c, a, b)]
        hit = [r for r in rot if (min(r[0], r[1]), max(r[0], r[1])) in split]
        if hit:
            x, y, z = hit[0]
            m = mid(x, y)
            tris += [(x, m, z), (m, y, z)]
            greens += [(t, (a, b, c))] * 2
        else:
            tris.append((a, b, c))
            greens.append(None)
    return tris, greens


def _has_hanging_edges(tris, verts, lookup) -> bool:
    used = {v for tri in tris for v in tri}
    for a, b, c in tris:
        for x, y in ((a, b), (b, c), (c, a)):
            m = _midpoint_index(x, y, verts, lookup)
            if m is not None and m in used:
                return True
    return False


def locate_points(mesh: TriMesh, points: np.ndarray, tol: float = 1e-10):
    """Containing triangle and barycentric coordinates of each point.

    Raises MeshError if a point lies outside every triangle by more than
    ``tol`` in barycentric coordinates.
    """
    points = np.asarray(points, dtype=float)
    tri_idx = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), 3))
    tree = cKDTree(mesh.centroids)
    p = mesh.vertices[mesh.triangles]
    pending = np.arange(len(points))
    for k in (8, 32, 128):
        if len(pending) == 0:
            break
        k = min(k, mesh.n_triangles)
        _, cand = tree.query(points[pending], k=k)
        cand = np.asarray(cand).reshape(len(pending), k)
        lam = _barycentric(p[cand], points[pending][:, None, :])  # (m, k, 3)
        ok = lam.min(axis=2) >= -tol
        found = ok.any(axis=1)
        first = np.argmax(ok, axis=1)
        rows = np.nonzero(found)[0]
        tri_idx[pending[rows]] = cand[rows, first[rows]]
        bary[pending[rows]] = lam[rows, first[rows]]
        pending = pending[~found]
    for i in pending:
        lam = _barycentric(p, points[i][None, :])
        worst = lam.min(axis=1)
        t = int(np.argmax(worst))
        if worst[t] < -tol:
            raise MeshError(f"point {points[i].tolist()} lies outside the mesh")
        tri_idx[i] = t
        bary[i] = lam[t]
    return tri_idx, bary


def _barycentric(tri_pts, x):
    a, b, c = tri_pts[..., 0, :], tri_pts[..., 1, :], tri_pts[..., 2, :]
    v0, v1, v2 = b - a, c - a, x - a
    det = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    l1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / det
    l2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def interpolate_nodal(new_points: np.ndarray, old: TriMesh, values: np.ndarray) -> np.ndarray:
    """P1 interpolation of nodal ``values`` (first axis = vertices of ``old``)."""
    tri, lam = locate_points(old, new_points)
    nodes = old.triangles[tri]
    vals = np.asarray(values)[nodes]  # (m, 3, ...)
    return np.einsum("mk,mk...->m...", lam, vals)


def interpolate_cellwise(new: TriMesh, old: TriMesh, values: np.ndarray) -> np.ndarray:
    """Piecewise-constant transfer: each new cell takes the value of the old
    cell containing its centroid."""
    tri, _ = locate_points(old, new.centroids)
    return np.asarray(values)[tri]

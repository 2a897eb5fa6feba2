"""Conforming 2D triangulations with newest-vertex bisection.

A triangle is stored as a vertex triple ``(a, b, c)`` whose reference edge
is always the edge ``(a, b)``; ``c`` is the newest vertex. Bisecting a
triangle inserts the midpoint ``m`` of its reference edge and produces the
sons ``(c, a, m)`` and ``(b, c, m)``, so the sons' reference edges are the
former non-reference edges and the new vertex is the sons' newest vertex.

Every mesh obtained by refinement keeps a handle to a shared
:class:`MeshForest`, the genealogy of all bisections performed since the
initial triangulation. The forest makes three things exact and cheap:
overlays (coarsest common refinements) are computed on the binary trees
instead of by geometric intersection, nodal prolongation between nested
meshes follows midpoint creation records, and structural audits (son areas,
generations, boundary flags) can be checked for every node ever created.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    """Raised for invalid triangulations or refusal of a mesh operation."""


@dataclass(frozen=True)
class RefinementRecord:
    """Bookkeeping of one refinement call.

    ``refined`` contains the indices (into the old mesh) of all triangles
    that were bisected, including those forced by conformity closure;
    ``sons_of`` maps each refined triangle to the indices of the new-mesh
    triangles covering it (2, 3 or 4 of them).
    """

    marked: frozenset
    refined: frozenset
    sons_of: dict = field(repr=False)
    nt_before: int = 0
    nt_after: int = 0


class MeshForest:
    """Genealogy ledger shared by all meshes refined from one initial mesh.

    Vertices and triangle nodes are append-only; node ids and vertex ids
    are stable, so a mesh is just a selection of leaf node ids.
    """

    __slots__ = (
        "_coords",
        "_vparent",
        "_vboundary",
        "_nv",
        "_tri",
        "_parent",
        "_gen",
        "_root",
        "_sons",
        "_nn",
        "_midpoint",
    )

    def __init__(self, coords, triangles):
        coords = np.asarray(coords, dtype=float)
        triangles = np.asarray(triangles, dtype=np.int64)
        nv = coords.shape[0]
        nn = triangles.shape[0]
        self._coords = np.empty((max(2 * nv, 16), 2))
        self._coords[:nv] = coords
        self._vparent = np.full((max(2 * nv, 16), 2), -1, dtype=np.int64)
        self._vboundary = np.zeros(max(2 * nv, 16), dtype=bool)
        self._nv = nv
        self._tri = np.empty((max(2 * nn, 16), 3), dtype=np.int64)
        self._tri[:nn] = triangles
        self._parent = np.full(max(2 * nn, 16), -1, dtype=np.int64)
        self._gen = np.zeros(max(2 * nn, 16), dtype=np.int64)
        self._root = np.empty(max(2 * nn, 16), dtype=np.int64)
        self._root[:nn] = np.arange(nn)
        self._sons = np.full((max(2 * nn, 16), 2), -1, dtype=np.int64)
        self._nn = nn
        self._midpoint = {}

    # -- growth helpers -------------------------------------------------

    def _ensure_vertex_capacity(self, extra):
        need = self._nv + extra
        cap = self._coords.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        for name in ("_coords", "_vparent"):
            old = getattr(self, name)
            grown = np.empty((new_cap, 2), dtype=old.dtype)
            grown[: self._nv] = old[: self._nv]
            if name == "_vparent":
                grown[self._nv:] = -1
            setattr(self, name, grown)
        vb = np.zeros(new_cap, dtype=bool)
        vb[: self._nv] = self._vboundary[: self._nv]
        self._vboundary = vb

    def _ensure_node_capacity(self, extra):
        need = self._nn + extra
        cap = self._tri.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        tri = np.empty((new_cap, 3), dtype=np.int64)
        tri[: self._nn] = self._tri[: self._nn]
        self._tri = tri
        sons = np.full((new_cap, 2), -1, dtype=np.int64)
        sons[: self._nn] = self._sons[: self._nn]
        self._sons = sons
        for name in ("_parent", "_gen", "_root"):
            old = getattr(self, name)
            grown = np.empty(new_cap, dtype=old.dtype)
            grown[: self._nn] = old[: self._nn]
            setattr(self, name, grown)

    # -- queries ---------------------------------------------------------

    @property
    def n_vertices(self):
        return self._nv

    @property
    def n_nodes(self):
        return self._nn

    def coords(self, gids=None):
        view = self._coords[: self._nv]
        return view if gids is None else view[gids]

    def vertex_parents(self, gids=None):
        view = self._vparent[: self._nv]
        return view if gids is None else view[gids]

    def vertex_on_boundary(self, gids=None):
        view = self._vboundary[: self._nv]
        return view if gids is None else view[gids]

    def node_triple(self, nids):
        return self._tri[nids]

    def node_parent(self, nids):
        return self._parent[nids]

    def node_generation(self, nids):
        return self._gen[nids]

    def node_root(self, nids):
        return self._root[nids]

    def node_area(self, nids):
        tri = self._tri[nids]
        p0 = self._coords[tri[..., 0]]
        p1 = self._coords[tri[..., 1]]
        p2 = self._coords[tri[..., 2]]
        return 0.5 * np.abs(
            (p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
            - (p1[..., 1] - p0[..., 1]) * (p2[..., 0] - p0[..., 0])
        )

    # -- mutation (refinement only) ---------------------------------------

    def midpoint(self, ga, gb, on_boundary):
        """Vertex id of the midpoint of edge (ga, gb), creating it if needed.

        The lookup table is shared across all meshes of the forest, so two
        meshes bisecting the same edge agree on the new vertex.
        """
        key = (ga, gb) if ga < gb else (gb, ga)
        gid = self._midpoint.get(key)
        if gid is not None:
            return gid
        self._ensure_vertex_capacity(1)
        gid = self._nv
        self._coords[gid] = 0.5 * (self._coords[ga] + self._coords[gb])
        self._vparent[gid, 0] = key[0]
        self._vparent[gid, 1] = key[1]
        self._vboundary[gid] = on_boundary
        self._nv += 1
        self._midpoint[key] = gid
        return gid

    def _add_node(self, triple, parent):
        self._ensure_node_capacity(1)
        nid = self._nn
        self._tri[nid] = triple
        self._parent[nid] = parent
        self._gen[nid] = self._gen[parent] + 1
        self._root[nid] = self._root[parent]
        self._nn += 1
        return nid

    def bisect(self, nid, ref_on_boundary):
        """Son node ids of ``nid``, creating them on first use.

        Bisection of a node is deterministic (midpoint of its reference
        edge), so sons are shared between all meshes of the forest; a
        second branch bisecting the same element receives the same ids.
        """
        sons = self._sons[nid]
        if sons[0] >= 0:
            return int(sons[0]), int(sons[1])
        a, b, c = (int(v) for v in self._tri[nid])
        m = self.midpoint(a, b, ref_on_boundary)
        son_a = self._add_node((c, a, m), nid)
        son_b = self._add_node((b, c, m), nid)
        self._sons[nid, 0] = son_a
        self._sons[nid, 1] = son_b
        return son_a, son_b


class Mesh:
    """Immutable view of a set of forest leaves forming a conforming mesh.

    Vertices are numbered locally (0..NV-1) in increasing order of their
    forest vertex id, which makes vertex sets of nested meshes comparable.
    Derived structures (edge table, areas, boundary data) are computed
    lazily and cached.
    """

    def __init__(self, forest, node_ids):
        self.forest = forest
        node_ids = np.asarray(node_ids, dtype=np.int64)
        node_ids.setflags(write=False)
        self.node_ids = node_ids

    # -- basic geometry ----------------------------------------------------

    @property
    def n_elements(self):
        return int(self.node_ids.shape[0])

    @property
    def n_vertices(self):
        return int(self.vertex_gids.shape[0])

    @cached_property
    def tri_gids(self):
        t = self.forest.node_triple(self.node_ids)
        t.setflags(write=False)
        return t

    @cached_property
    def vertex_gids(self):
        g = np.unique(self.tri_gids)
        g.setflags(write=False)
        return g

    @cached_property
    def triangles(self):
        t = np.searchsorted(self.vertex_gids, self.tri_gids)
        t.setflags(write=False)
        return t

    @cached_property
    def vertices(self):
        v = self.forest.coords(self.vertex_gids)
        v.setflags(write=False)
        return v

    @cached_property
    def generations(self):
        g = self.forest.node_generation(self.node_ids)
        g.setflags(write=False)
        return g

    @cached_property
    def parents(self):
        p = self.forest.node_parent(self.node_ids)
        p.setflags(write=False)
        return p

    @cached_property
    def signed_areas(self):
        p = self.vertices
        t = self.triangles
        d1 = p[t[:, 1]] - p[t[:, 0]]
        d2 = p[t[:, 2]] - p[t[:, 0]]
        a = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        a.setflags(write=False)
        return a

    @cached_property
    def areas(self):
        a = np.abs(self.signed_areas)
        a.setflags(write=False)
        return a

    # -- edge table ---------------------------------------------------------

    @cached_property
    def _edge_data(self):
        t = self.triangles
        pairs = np.stack(
            [t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1
        ).reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        tri_edges = inverse.reshape(-1, 3)
        counts = np.bincount(inverse, minlength=edges.shape[0])
        if np.any(counts > 2):
            raise MeshError("non-conforming mesh: edge shared by more than two triangles")
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)])
        edge_tris = np.full((edges.shape[0], 2), -1, dtype=np.int64)
        first = order[starts[:-1]]
        edge_tris[:, 0] = first // 3
        has_two = counts == 2
        second = order[starts[:-1][has_two] + 1]
        edge_tris[has_two, 1] = second // 3
        return edges, tri_edges, edge_tris, counts

    @property
    def edges(self):
        """Unique undirected edges as sorted local vertex pairs, shape (NE, 2)."""
        return self._edge_data[0]

    @property
    def tri_edges(self):
        """Edge ids per triangle, shape (NT, 3); slot 0 is the reference edge."""
        return self._edge_data[1]

    @property
    def edge_tris(self):
        """Adjacent triangle ids per edge (-1 when on the boundary), shape (NE, 2)."""
        return self._edge_data[2]

    @property
    def edge_counts(self):
        return self._edge_data[3]

    @cached_property
    def edge_lengths(self):
        e = self.edges
        d = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        out = np.hypot(d[:, 0], d[:, 1])
        out.setflags(write=False)
        return out

    @cached_property
    def boundary_edges(self):
        """Boundary edges as sorted local vertex pairs."""
        be = self.edges[self.edge_counts == 1]
        be.setflags(write=False)
        return be

    @cached_property
    def boundary_markers(self):
        """Per boundary edge flag; 1 marks homogeneous Dirichlet (the only kind)."""
        m = np.ones(self.boundary_edges.shape[0], dtype=np.int64)
        m.setflags(write=False)
        return m

    @cached_property
    def is_boundary_vertex(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def interior_vertices(self):
        iv = np.nonzero(~self.is_boundary_vertex)[0]
        iv.setflags(write=False)
        return iv

    def same_elements(self, other):
        return self.forest is other.forest and np.array_equal(
            np.sort(self.node_ids), np.sort(other.node_ids)
        )

    def validate(self):
        """Check the structural invariants; raises :class:`MeshError` on failure."""
        if np.any(self.signed_areas <= 0.0):
            raise MeshError("triangle with non-positive area")
        counts = self.edge_counts
        if np.any((counts < 1) | (counts > 2)):
            raise MeshError("edge incidence outside {1, 2}")
        incidence_boundary = self.is_boundary_vertex
        ledger_boundary = self.forest.vertex_on_boundary(self.vertex_gids)
        if not np.array_equal(incidence_boundary, ledger_boundary):
            raise MeshError("incidence-1 edges do not match the domain boundary")


def _assign_reference_edges(coords, triangles):
    """Rotate triples so the longest edge sits in slot (0, 1).

    Ties are broken by the smallest opposite-vertex index, using exact
    comparisons of squared lengths so the choice is deterministic.
    """
    p = coords[triangles]
    sq = np.empty((triangles.shape[0], 3))
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        d = p[:, j] - p[:, i]
        sq[:, k] = d[:, 0] ** 2 + d[:, 1] ** 2
    opposite = triangles[:, [2, 0, 1]]
    best = np.where(sq == sq.max(axis=1, keepdims=True), opposite, np.iinfo(np.int64).max)
    slot = np.argmin(best, axis=1)
    rotated = np.empty_like(triangles)
    for r in range(3):
        rows = slot == r
        rotated[rows] = triangles[np.ix_(np.nonzero(rows)[0], [(r + k) % 3 for k in range(3)])]
    return rotated


def _validate_initial(coords, triangles, boundary_spec):
    coords = np.ascontiguousarray(np.asarray(coords, dtype=float))
    triangles = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64))
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise MeshError("vertex array must have shape (NV, 2)")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError("triangle array must have shape (NT, 3)")
    nv = coords.shape[0]
    if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= nv:
        raise MeshError("triangle vertex index out of range")
    if np.unique(triangles).shape[0] != nv:
        raise MeshError("non-conforming mesh: unused vertex")

    # positive orientation; a zero area is a degenerate input
    d1 = coords[triangles[:, 1]] - coords[triangles[:, 0]]
    d2 = coords[triangles[:, 2]] - coords[triangles[:, 0]]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(area2 == 0.0):
        raise MeshError("degenerate triangle with zero area")
    flip = area2 < 0.0
    triangles[flip] = triangles[np.ix_(np.nonzero(flip)[0], [0, 2, 1])]

    key = np.sort(triangles, axis=1)
    if np.unique(key, axis=0).shape[0] != triangles.shape[0]:
        raise MeshError("non-conforming mesh: duplicated triangle")

    pairs = np.sort(
        np.stack([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1
                 ).reshape(-1, 2),
        axis=1,
    )
    edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
    counts = np.bincount(inverse.ravel(), minlength=edges.shape[0])
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: edge shared by more than two triangles")
    boundary = edges[counts == 1]

    if boundary_spec is not None:
        spec = np.asarray(boundary_spec, dtype=np.int64)
        if spec.ndim != 2 or spec.shape[1] not in (2, 3):
            raise MeshError("inconsistent boundary spec: expected rows (va, vb[, marker])")
        if spec.shape[1] == 3 and np.any(spec[:, 2] != 1):
            raise MeshError("inconsistent boundary spec: only Dirichlet marker 1 is supported")
        given = np.unique(np.sort(spec[:, :2], axis=1), axis=0)
        if given.shape != boundary.shape or not np.array_equal(given, boundary):
            raise MeshError("inconsistent boundary spec: edges do not match the mesh boundary")
    return coords, triangles, boundary


def load_initial_mesh(vertex_array, triangle_array, boundary_spec=None):
    """Build an initial mesh from raw arrays, assigning reference edges.

    The boundary is homogeneous Dirichlet throughout. ``boundary_spec``
    may list the boundary edges (rows ``va vb`` or ``va vb marker``) and is
    validated against the edge incidence of the triangulation; ``None``
    derives it.
    """
    coords, triangles, boundary = _validate_initial(vertex_array, triangle_array, boundary_spec)
    triangles = _assign_reference_edges(coords, triangles)
    return _finish_initial(coords, triangles, boundary)


def _finish_initial(coords, triangles, boundary):
    forest = MeshForest(coords, triangles)
    vb = forest._vboundary
    vb[boundary.ravel()] = True
    mesh = Mesh(forest, np.arange(triangles.shape[0], dtype=np.int64))
    mesh.validate()
    return mesh


def refine_nvb(mesh, marked):
    """Bisect the marked triangles and close the mesh to conformity.

    Marked triangles are bisected at their reference edge; the closure
    marks the reference edge of every triangle that received a marked edge
    until the edge set is compatible, then all triangles are split in one
    pass (into 2, 3 or 4 sons depending on how many of their edges are
    marked). Returns the refined mesh and a :class:`RefinementRecord`.
    """
    nt = mesh.n_elements
    if isinstance(marked, (set, frozenset)):
        marked = np.fromiter(marked, dtype=np.int64, count=len(marked))
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size and (marked[0] < 0 or marked[-1] >= nt):
        raise MeshError("marked triangle index out of range")
    record_empty = RefinementRecord(
        marked=frozenset(), refined=frozenset(), sons_of={}, nt_before=nt, nt_after=nt
    )
    if marked.size == 0:
        return mesh, record_empty

    edges, tri_edges, edge_tris, counts = mesh._edge_data
    ref_edge = tri_edges[:, 0]
    edge_marked = np.zeros(edges.shape[0], dtype=bool)

    # closure: any triangle touching a marked edge must have its reference
    # edge marked; worklist with a hard step budget to fail loudly instead
    # of looping on a logic bug
    stack = []

    def _mark(e):
        if not edge_marked[e]:
            edge_marked[e] = True
            stack.append(e)

    for t in marked:
        _mark(ref_edge[t])
    budget = 4 * nt
    steps = 0
    while stack:
        steps += 1
        if steps > budget:
            raise MeshError("closure exceeded its step budget; refinement logic error")
        e = stack.pop()
        for t in edge_tris[e]:
            if t >= 0:
                _mark(ref_edge[t])

    pattern = edge_marked[tri_edges]
    any_marked = pattern.any(axis=1)
    refined_idx = np.nonzero(any_marked)[0]
    kept_ids = mesh.node_ids[~any_marked]

    forest = mesh.forest
    new_ids = list(kept_ids)
    sons_of = {}
    for t in refined_idx:
        e0, e1, e2 = tri_edges[t]
        nid = int(mesh.node_ids[t])
        first = len(new_ids)
        # son A = (c, a, m) carries old edge (c, a) as its reference edge,
        # son B = (b, c, m) carries (b, c); a marked carried edge splits
        # the son once more
        son_a, son_b = forest.bisect(nid, counts[e0] == 1)
        if pattern[t, 2]:
            new_ids.extend(forest.bisect(son_a, counts[e2] == 1))
        else:
            new_ids.append(son_a)
        if pattern[t, 1]:
            new_ids.extend(forest.bisect(son_b, counts[e1] == 1))
        else:
            new_ids.append(son_b)
        sons_of[int(t)] = tuple(range(first, len(new_ids)))

    refined_mesh = Mesh(forest, np.array(new_ids, dtype=np.int64))
    record = RefinementRecord(
        marked=frozenset(int(t) for t in marked),
        refined=frozenset(int(t) for t in refined_idx),
        sons_of=sons_of,
        nt_before=nt,
        nt_after=refined_mesh.n_elements,
    )
    return refined_mesh, record


def uniform_refine(mesh, times=1):
    """Bisect every triangle, ``times`` rounds."""
    for _ in range(times):
        mesh, _ = refine_nvb(mesh, np.arange(mesh.n_elements))
    return mesh


def _covered(source, target_leafset, forest):
    """Leaves of ``source`` that lie inside (or equal) a leaf of the target set."""
    out = []
    cache = {}
    parent = forest._parent
    for nid in source:
        nid = int(nid)
        path = []
        cur = nid
        while True:
            hit = cache.get(cur)
            if hit is not None:
                break
            if cur in target_leafset:
                hit = True
                break
            path.append(cur)
            nxt = int(parent[cur])
            if nxt < 0:
                hit = False
                break
            cur = nxt
        for n in path:
            cache[n] = hit
        if hit:
            out.append(nid)
    return out


def overlay(m1, m2):
    """Coarsest common refinement of two meshes from the same initial mesh.

    Computed on the genealogy: per region the deeper of the two leaves
    wins. The result refines both inputs and satisfies
    ``#(m1 + m2) <= #m1 + #m2 - #initial``.
    """
    if m1.forest is not m2.forest:
        raise MeshError("genealogy mismatch: meshes do not share an initial triangulation")
    set1 = set(int(n) for n in m1.node_ids)
    set2 = set(int(n) for n in m2.node_ids)
    ids = _covered(m1.node_ids, set2, m1.forest)
    seen = set(ids)
    for nid in _covered(m2.node_ids, set1, m1.forest):
        if nid not in seen:
            ids.append(nid)
            seen.add(nid)
    return Mesh(m1.forest, np.array(ids, dtype=np.int64))


def shape_regularity(mesh):
    """Smallest gamma with gamma^-1 sqrt(|T|) <= diam(T) <= gamma sqrt(|T|) for all T."""
    t = mesh.triangles
    p = mesh.vertices
    diam = np.zeros(mesh.n_elements)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        d = p[t[:, j]] - p[t[:, i]]
        diam = np.maximum(diam, np.hypot(d[:, 0], d[:, 1]))
    root_area = np.sqrt(mesh.areas)
    return float(np.max(np.maximum(diam / root_area, root_area / diam)))


def closure_audit(records):
    """Smallest C with #T_l - #T_0 <= C * sum of #marked over earlier steps."""
    if not records:
        raise MeshError("closure audit needs at least one refinement record")
    nt0 = records[0].nt_before
    marked_sum = 0
    best = 0.0
    for rec in records:
        marked_sum += len(rec.marked)
        if marked_sum > 0:
            best = max(best, (rec.nt_after - nt0) / marked_sum)
    return best


def audit_refinement(old_mesh, new_mesh, record):
    """Structural checks after one refinement step; raises on violation.

    Verifies conformity of the result, the two-sons inequality
    ``#refined <= #new - #old``, exact area halving along every new
    genealogy edge, and generation increments of one per bisection.
    """
    new_mesh.validate()
    if len(record.refined) > record.nt_after - record.nt_before:
        raise MeshError("refined elements exceed the element-count growth")
    forest = new_mesh.forest
    old_set = set(int(n) for n in old_mesh.node_ids)
    fresh = [int(n) for n in new_mesh.node_ids if int(n) not in old_set]
    seen = set()
    stack = list(fresh)
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        parent = int(forest.node_parent(nid))
        if parent < 0 or nid in old_set:
            continue
        a_child = float(forest.node_area(nid))
        a_parent = float(forest.node_area(parent))
        if abs(a_child - 0.5 * a_parent) > 1e-12 * a_parent:
            raise MeshError("bisection did not halve the element area")
        if int(forest.node_generation(nid)) != int(forest.node_generation(parent)) + 1:
            raise MeshError("son generation is not parent generation + 1")
        if parent not in old_set:
            stack.append(parent)
    for t, sons in record.sons_of.items():
        if len(sons) < 2:
            raise MeshError("refined triangle with fewer than two sons")


# -- plain-text mesh files --------------------------------------------------

def write_mesh(mesh, path):
    """Write the line-oriented mesh format: header ``NV NT``, vertices,
    triangles as ``v0 v1 v2 ref_slot``, then boundary edges ``va vb marker``.

    Triples are stored with their reference edge normalised to slot 0.
    """
    lines = [f"{mesh.n_vertices} {mesh.n_elements}"]
    for x, y in mesh.vertices:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"{a} {b} {c} 0")
    for (a, b), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        lines.append(f"{a} {b} {m}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path):
    """Read the plain-text mesh format written by :func:`write_mesh`.

    Reference edges are taken from the file (``ref_slot`` rotates the
    triple), not re-derived, so writer and reader round-trip the integer
    fields exactly.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    rows = [line.split() for line in tokens if line.strip()]
    nv, nt = (int(v) for v in rows[0])
    if len(rows) < 1 + nv + nt:
        raise MeshError("truncated mesh file")
    coords = np.array([[float(v) for v in row] for row in rows[1: 1 + nv]])
    tris = np.empty((nt, 3), dtype=np.int64)
    for i, row in enumerate(rows[1 + nv: 1 + nv + nt]):
        v0, v1, v2, slot = (int(v) for v in row)
        order = [(slot + k) % 3 for k in range(3)]
        tris[i] = np.array([v0, v1, v2], dtype=np.int64)[order]
    boundary = None
    rest = rows[1 + nv + nt:]
    if rest:
        boundary = np.array([[int(v) for v in row] for row in rest], dtype=np.int64)

    # fix orientation before validating so the reference edge stays in slot
    # (0, 1): swapping its endpoints flips the sign and keeps the edge
    d1 = coords[tris[:, 1]] - coords[tris[:, 0]]
    d2 = coords[tris[:, 2]] - coords[tris[:, 0]]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flip = area2 < 0.0
    tris[flip] = tris[np.ix_(np.nonzero(flip)[0], [1, 0, 2])]

    coords2, tris2, bnd = _validate_initial(coords, tris, boundary)
    return _finish_initial(coords2, tris2, bnd)


# -- builtin initial meshes ---------------------------------------------------

def unit_square_mesh(cross=False):
    """Unit square as 2 triangles, or as the 4-triangle cross mesh with a
    centre vertex (the smallest mesh with an interior degree of freedom)."""
    if cross:
        vertices = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)]
        triangles = [(0, 1, 4), (1, 2, 4), (2, 3, 4), (3, 0, 4)]
    else:
        vertices = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        triangles = [(0, 1, 2), (0, 2, 3)]
    return load_initial_mesh(vertices, triangles)


def lshape_mesh():
    """L-shaped domain (-1,1)^2 minus [0,1]x[-1,0] as 6 triangles.

    All diagonals meet in the reentrant corner at the origin.
    """
    vertices = [
        (-1.0, -1.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 0.0),
        (1.0, 0.0), (-1.0, 1.0), (0.0, 1.0), (1.0, 1.0),
    ]
    triangles = [(0, 1, 3), (0, 3, 2), (2, 3, 5), (3, 6, 5), (3, 4, 7), (3, 7, 6)]
    return load_initial_mesh(vertices, triangles)

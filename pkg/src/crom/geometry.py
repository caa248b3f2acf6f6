"""Reference-component geometry and triangular meshes.

Every component is the unit square ``[0, 1]^2`` with an optional polygonal
obstacle cut out of its interior.  All meshes generated with the same
``n_edge`` share the uniform outer-edge partition, so any two components can be
placed side by side and meet conformingly on any pair of opposing faces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .errors import MeshGenerationFailure

KINDS = ("circle", "square", "triangle", "star", "empty")
FACES = ("north", "south", "east", "west")
OPPOSITE = {"north": "south", "south": "north", "east": "west", "west": "east"}
# outward unit normal of each outer face
NORMALS = {
    "north": np.array([0.0, 1.0]),
    "south": np.array([0.0, -1.0]),
    "east": np.array([1.0, 0.0]),
    "west": np.array([-1.0, 0.0]),
}
# translation taking a point of a component to the matching point of its
# neighbor across ``face``
SHIFTS = {
    "north": np.array([0.0, -1.0]),
    "south": np.array([0.0, 1.0]),
    "east": np.array([-1.0, 0.0]),
    "west": np.array([1.0, 0.0]),
}
CLEARANCE = 0.05
STAR_INNER_RATIO = 0.45


@dataclass(frozen=True)
class ComponentGeometry:
    """Obstacle description for one reference component.

    ``obstacle_scale`` is the obstacle width: the side length for squares and
    triangles and the diameter of the circumscribed circle for circles and
    stars.
    """

    kind: str
    obstacle_center: tuple = (0.5, 0.5)
    obstacle_scale: float = 0.5
    polygon_segments: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")
        object.__setattr__(self, "obstacle_center", tuple(float(c) for c in self.obstacle_center))
        if self.kind == "empty":
            return
        if self.obstacle_scale <= 0:
            raise ValueError("obstacle_scale must be positive")
        if self.kind == "circle" and self.polygon_segments < 8:
            raise ValueError("circle needs at least 8 polygon segments")
        poly = self.polygon()
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        if lo.min() < CLEARANCE or hi.max() > 1.0 - CLEARANCE:
            raise ValueError(
                f"{self.kind} obstacle violates the {CLEARANCE} clearance from the outer edges"
            )

    def polygon(self):
        """Counter-clockwise obstacle polygon vertices, or ``None`` if empty."""
        cx, cy = self.obstacle_center
        s = self.obstacle_scale
        if self.kind == "empty":
            return None
        if self.kind == "circle":
            t = 2.0 * np.pi * np.arange(self.polygon_segments) / self.polygon_segments
            r = 0.5 * s
        elif self.kind == "square":
            half = 0.5 * s
            return np.array(
                [[cx - half, cy - half], [cx + half, cy - half],
                 [cx + half, cy + half], [cx - half, cy + half]]
            )
        elif self.kind == "triangle":
            t = np.pi / 2 + 2.0 * np.pi * np.arange(3) / 3
            r = s / np.sqrt(3.0)
        else:  # star
            t = np.pi / 2 + np.pi * np.arange(10) / 5
            r = 0.5 * s * np.where(np.arange(10) % 2 == 0, 1.0, STAR_INNER_RATIO)
        return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])

    def obstacle_area(self):
        poly = self.polygon()
        return 0.0 if poly is None else polygon_area(poly)

    def obstacle_perimeter(self):
        poly = self.polygon()
        if poly is None:
            return 0.0
        return float(np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1).sum())


def default_library():
    """The five reference components used for training and assembly."""
    return {
        "circle": ComponentGeometry("circle", obstacle_scale=0.5, polygon_segments=32),
        "square": ComponentGeometry("square", obstacle_scale=0.4),
        "triangle": ComponentGeometry("triangle", obstacle_scale=0.55),
        "star": ComponentGeometry("star", obstacle_scale=0.65),
        "empty": ComponentGeometry("empty"),
    }


@dataclass(frozen=True, eq=False)
class ComponentMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    mesh_size: float
    name: str = field(default="", compare=False)

    def __post_init__(self):
        for attr in ("vertices", "triangles", "boundary_edges", "boundary_tags"):
            arr = np.array(getattr(self, attr))
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    @property
    def boundary_facets(self):
        return [((int(a), int(b)), str(t)) for (a, b), t in zip(self.boundary_edges, self.boundary_tags)]

    @property
    def n_edge(self):
        return int(round(1.0 / self.mesh_size))

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self):
        return float(self.signed_areas().sum())

    def facets(self, tag):
        return self.boundary_edges[self.boundary_tags == tag]

    def facet_length(self, tag):
        e = self.facets(tag)
        if len(e) == 0:
            return 0.0
        d = self.vertices[e[:, 1]] - self.vertices[e[:, 0]]
        return float(np.linalg.norm(d, axis=1).sum())

    def same_as(self, other):
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.boundary_tags, other.boundary_tags)
            and self.mesh_size == other.mesh_size
        )


def polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return float(0.5 * (x * np.roll(y, -1) - np.roll(x, -1) * y).sum())


def points_in_polygon(points, poly):
    """Even-odd rule containment test for many points at once."""
    x, y = points[:, 0:1], points[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    crossings = straddle & (x < xint)
    return crossings.sum(axis=1) % 2 == 1


def distance_to_segments(points, a, b):
    """Distance from each point to the nearest of the segments ``a[k] -> b[k]``."""
    d = b - a
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip((rel * d).sum(-1) / (d * d).sum(-1), 0.0, 1.0)
    nearest = a[None] + t[..., None] * d[None]
    return np.linalg.norm(points[:, None, :] - nearest, axis=-1).min(axis=1)


def _structured_unit_square(n):
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g, indexing="xy")
    verts = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # idx[row=j, col=i]
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    tris = np.concatenate(
        [np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])]
    )
    return verts, tris


def _outer_grid(n):
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g, indexing="xy")
    return np.column_stack([X.ravel(), Y.ravel()])


def _on_outer_boundary(p, tol=1e-14):
    return (
        (np.abs(p[:, 0]) < tol) | (np.abs(p[:, 0] - 1) < tol)
        | (np.abs(p[:, 1]) < tol) | (np.abs(p[:, 1] - 1) < tol)
    )


def _subdivide_polygon(poly, spacing):
    pts = []
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        m = max(1, int(np.ceil(np.linalg.norm(b - a) / spacing - 1e-9)))
        t = np.arange(m) / m
        pts.append(a[None] + t[:, None] * (b - a)[None])
    return np.concatenate(pts)


def _split_encroached(obst, others, max_rounds=30):
    """Split obstacle segments until their diametral circles are empty.

    A segment with an empty diametral circle is guaranteed to be an edge of the
    Delaunay triangulation, which is how the obstacle boundary is recovered
    without a constrained triangulator.
    """
    for _ in range(max_rounds):
        nxt = np.roll(obst, -1, axis=0)
        mid = 0.5 * (obst + nxt)
        rad = 0.5 * np.linalg.norm(nxt - obst, axis=1)
        allpts = np.concatenate([others, obst])
        dist = np.linalg.norm(allpts[:, None, :] - mid[None], axis=-1)
        inside = dist < rad[None] * (1 + 1e-9)
        n_other = len(others)
        k = np.arange(len(obst))
        # segment endpoints are on the circle, never count them
        inside[n_other + k, k] = False
        inside[n_other + (k + 1) % len(obst), k] = False
        bad = inside.any(axis=0)
        if not bad.any():
            return obst
        out = []
        for i in range(len(obst)):
            out.append(obst[i])
            if bad[i]:
                out.append(mid[i])
        obst = np.array(out)
    raise MeshGenerationFailure("obstacle boundary could not be recovered (encroachment persists)")


def _edge_keys(tris):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    return e


def _find_boundary(tris):
    e = _edge_keys(tris)
    s = np.sort(e, axis=1)
    _, inv, counts = np.unique(s, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    return e[counts[inv] == 1], counts


def _tag_edges(verts, edges, tol=1e-12):
    p, q = verts[edges[:, 0]], verts[edges[:, 1]]
    tags = np.full(len(edges), "obstacle", dtype="<U8")
    for tag, axis, val in (("west", 0, 0.0), ("east", 0, 1.0), ("south", 1, 0.0), ("north", 1, 1.0)):
        on = (np.abs(p[:, axis] - val) < tol) & (np.abs(q[:, axis] - val) < tol)
        tags[on] = tag
    return tags


def _delaunay(points, options=None):
    try:
        return Delaunay(points, qhull_options=options).simplices.astype(np.int64)
    except QhullError as exc:
        raise MeshGenerationFailure(f"triangulation failed: {exc}") from exc


def build_component_mesh(geometry, n_edge=8, name=None):
    """Triangulate a reference component.

    The outer edges always carry the uniform partition into ``n_edge``
    segments.  Obstacles are cut out of a structured background grid: nearby
    grid points are removed, the obstacle polygon is sampled at roughly
    ``0.6 h`` and the result is re-triangulated by Delaunay.
    """
    if n_edge < 4:
        raise ValueError("n_edge must be at least 4")
    h = 1.0 / n_edge
    name = name or geometry.kind
    poly = geometry.polygon()
    if poly is None:
        verts, tris = _structured_unit_square(n_edge)
    else:
        grid = _outer_grid(n_edge)
        a, b = poly, np.roll(poly, -1, axis=0)
        near = distance_to_segments(grid, a, b) < 0.6 * h
        keep = (~points_in_polygon(grid, poly) & ~near) | _on_outer_boundary(grid)
        if points_in_polygon(grid[_on_outer_boundary(grid) & ~keep], poly).any():
            raise MeshGenerationFailure("obstacle reaches the outer boundary")
        others = grid[keep]
        obst = _subdivide_polygon(poly, 0.6 * h)
        obst = _split_encroached(obst, others)
        verts = np.concatenate([others, obst])
        tris = None
        for options in (None, "QJ"):
            cand = _delaunay(verts, options)
            centroids = verts[cand].mean(axis=1)
            cand = cand[~points_in_polygon(centroids, poly)]
            p = verts[cand]
            d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
            cand[area < 0] = cand[area < 0][:, [0, 2, 1]]
            if np.abs(area).min() > 1e-10 * h * h:
                tris = cand
                break
        if tris is None:
            raise MeshGenerationFailure("degenerate triangles near the obstacle")
        n_obst = len(obst)
        first = len(others)
        seg = {tuple(sorted((first + k, first + (k + 1) % n_obst))) for k in range(n_obst)}
        have = {tuple(sorted(e)) for e in _edge_keys(tris).tolist()}
        if not seg <= have:
            raise MeshGenerationFailure(
                f"obstacle boundary not recovered at n_edge={n_edge}"
            )
    edges, _ = _find_boundary(tris)
    tags = _tag_edges(verts, edges)
    order = np.lexsort((edges[:, 1], edges[:, 0], tags))
    mesh = ComponentMesh(verts, tris, edges[order], tags[order], h, name)
    if poly is not None:
        covered = mesh.area()
        if abs(covered - (1.0 - polygon_area(poly))) > 1e-10:
            raise MeshGenerationFailure("triangles do not cover the component exactly")
    return mesh


def build_library_meshes(n_edge=8, library=None):
    library = library or default_library()
    return {key: build_component_mesh(geom, n_edge, name=key) for key, geom in library.items()}


def _face_coord(face):
    return 0 if face in ("north", "south") else 1


def interface_trace(mesh, face):
    """Facets on an outer face, oriented and sorted by increasing coordinate.

    Returns an ``(k, 2)`` array of vertex indices ``[a, b]`` with
    ``coord(a) < coord(b)`` where the coordinate runs along the face
    (``x`` for north/south, ``y`` for east/west).
    """
    if face not in FACES:
        raise ValueError(f"unknown face {face!r}")
    edges = mesh.facets(face)
    c = _face_coord(face)
    xa = mesh.vertices[edges[:, 0], c]
    xb = mesh.vertices[edges[:, 1], c]
    edges = np.where((xa > xb)[:, None], edges[:, ::-1], edges)
    order = np.argsort(mesh.vertices[edges[:, 0], c], kind="stable")
    return edges[order]


def trace_points(mesh, face):
    tr = interface_trace(mesh, face)
    return np.concatenate([mesh.vertices[tr[:, 0]], mesh.vertices[tr[-1:, 1]]])


def traces_coincide(mesh_a, face_a, mesh_b, face_b, tol=1e-12):
    """True when ``face_a`` of ``mesh_a`` meets ``face_b`` of ``mesh_b`` conformingly."""
    if OPPOSITE[face_a] != face_b:
        return False
    pa = trace_points(mesh_a, face_a) + SHIFTS[face_a]
    pb = trace_points(mesh_b, face_b)
    return pa.shape == pb.shape and np.abs(pa - pb).max() <= tol


def validate_mesh(mesh):
    """List invariant violations; an empty list means the mesh is valid."""
    report = []
    area = mesh.signed_areas()
    for t in np.flatnonzero(area <= 0):
        report.append(f"triangle {t} has non-positive signed area {area[t]:.3e}")
    e = _edge_keys(mesh.triangles)
    s = np.sort(e, axis=1)
    uniq, counts = np.unique(s, axis=0, return_counts=True)
    for edge in uniq[counts > 2]:
        report.append(f"non-manifold edge {tuple(edge)}")
    single = {tuple(x) for x in uniq[counts == 1].tolist()}
    listed = {tuple(sorted(x)) for x in mesh.boundary_edges.tolist()}
    for edge in sorted(single - listed):
        report.append(f"boundary edge {edge} missing from boundary facets")
    for edge in sorted(listed - single):
        report.append(f"boundary facet {edge} is not on the mesh boundary")
    n = mesh.n_edge
    uniform = np.linspace(0.0, 1.0, n + 1)
    for face in FACES:
        c = _face_coord(face)
        pts = trace_points(mesh, face) if len(mesh.facets(face)) else np.zeros((0, 2))
        if len(pts) != n + 1 or np.abs(pts[:, c] - uniform).max() > 1e-12:
            report.append(f"trace mismatch on {face} face")
            continue
        fixed = {"north": (1, 1.0), "south": (1, 0.0), "east": (0, 1.0), "west": (0, 0.0)}[face]
        if np.abs(pts[:, fixed[0]] - fixed[1]).max() > 1e-12:
            report.append(f"trace mismatch on {face} face")
    obst = mesh.facets("obstacle")
    hole = 0.0
    if len(obst):
        p, q = mesh.vertices[obst[:, 0]], mesh.vertices[obst[:, 1]]
        # facets run with the fluid on the left, so the obstacle loop is clockwise
        hole = -0.5 * float((p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]).sum())
    if abs(area.sum() + hole - 1.0) > 1e-10:
        report.append(f"coverage mismatch: triangles + obstacle = {area.sum() + hole:.12f}")
    return report


def write_mesh(mesh, path):
    lines = ["CROM-MESH v1", repr(float(mesh.mesh_size)), str(len(mesh.vertices))]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(str(len(mesh.triangles)))
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(str(len(mesh.boundary_edges)))
    lines += [f"{i} {j} {t.upper()}" for (i, j), t in zip(mesh.boundary_edges.tolist(), mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path, name=""):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "CROM-MESH v1":
        raise ValueError(f"{path}: not a CROM-MESH v1 file")
    h = float(lines[1])
    pos = 2
    nv = int(lines[pos]); pos += 1
    verts = np.array([[float(v) for v in ln.split()] for ln in lines[pos:pos + nv]]).reshape(nv, 2)
    pos += nv
    nt = int(lines[pos]); pos += 1
    tris = np.array([[int(v) for v in ln.split()] for ln in lines[pos:pos + nt]], dtype=np.int64).reshape(nt, 3)
    pos += nt
    nb = int(lines[pos]); pos += 1
    rows = [ln.split() for ln in lines[pos:pos + nb]]
    edges = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(nb, 2)
    tags = np.array([r[2].lower() for r in rows], dtype="<U8")
    return ComponentMesh(verts, tris, edges, tags, h, name)

"""2D Delaunay triangulation of landmark pixels and lifting to a world-frame mesh."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from planevio.errors import AllCollinear, MissingDepth, TooFewPoints
from planevio.services.geometry import CameraIntrinsics, Pose

logger = logging.getLogger(__name__)

INCIRCLE_TOL = 1e-9
DUPLICATE_TOL = 1e-6
SUPER_SCALE = 100.0
NORMAL_TIE = 1e-12


def orient2d(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def incircle(a, b, c, d) -> float:
    """Positive iff d lies strictly inside the circumcircle of counterclockwise (a, b, c)."""
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    return (
        (adx * adx + ady * ady) * (bdx * cdy - cdx * bdy)
        + (bdx * bdx + bdy * bdy) * (cdx * ady - adx * cdy)
        + (cdx * cdx + cdy * cdy) * (adx * bdy - bdx * ady)
    )


def _incircle_many(P: np.ndarray, tris: np.ndarray, d: np.ndarray) -> np.ndarray:
    a, b, c = P[tris[:, 0]] - d, P[tris[:, 1]] - d, P[tris[:, 2]] - d
    la = (a * a).sum(axis=1)
    lb = (b * b).sum(axis=1)
    lc = (c * c).sum(axis=1)
    return (
        la * (b[:, 0] * c[:, 1] - c[:, 0] * b[:, 1])
        + lb * (c[:, 0] * a[:, 1] - a[:, 0] * c[:, 1])
        + lc * (a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1])
    )


@dataclass(frozen=True)
class Triangulation2D:
    vertices: list[tuple[np.ndarray, int]]
    triangles: list[tuple[int, int, int]]

    def pixels(self) -> np.ndarray:
        return np.array([p for p, _ in self.vertices], dtype=float).reshape(-1, 2)

    def ids(self) -> list[int]:
        return [i for _, i in self.vertices]


def delaunay2d(points, ids=None) -> Triangulation2D:
    """Bowyer-Watson construction; input is pre-sorted lexicographically for determinism."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    ids = np.arange(len(P)) if ids is None else np.asarray(list(ids))
    if len(P) != len(ids):
        raise ValueError("points and ids differ in length")

    order = np.lexsort((ids, P[:, 1], P[:, 0]))
    P, ids = P[order], ids[order]
    keep = [0] if len(P) else []
    for k in range(1, len(P)):
        if np.linalg.norm(P[k] - P[keep[-1]]) > DUPLICATE_TOL:
            keep.append(k)
    P, ids = P[keep], ids[keep]

    if len(P) < 3:
        raise TooFewPoints(f"Delaunay triangulation needs 3 distinct points, got {len(P)}")
    centered = P - P.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
        raise AllCollinear("all points are collinear")

    n = len(P)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = max(hi[0] - lo[0], hi[1] - lo[1], 1.0)
    mid = 0.5 * (lo + hi)
    s = SUPER_SCALE * span
    super_pts = np.array([[mid[0] - s, mid[1] - s], [mid[0] + s, mid[1] - s], [mid[0], mid[1] + s]])
    V = np.vstack([P, super_pts])

    tris = np.zeros((4 * n + 8, 3), dtype=int)
    alive = np.zeros(len(tris), dtype=bool)
    tris[0] = (n, n + 1, n + 2)
    alive[0] = True
    count = 1

    for k in range(n):
        idx = np.flatnonzero(alive[:count])
        det = _incircle_many(V, tris[idx], V[k])
        bad = idx[det > INCIRCLE_TOL]

        edges: dict[tuple[int, int], tuple[int, int] | None] = {}
        for t in bad:
            a, b, c = tris[t]
            for e in ((a, b), (b, c), (c, a)):
                key = (min(e), max(e))
                edges[key] = None if key in edges else e
        alive[bad] = False

        boundary = [e for e in edges.values() if e is not None]
        if count + len(boundary) > len(tris):
            grow = max(len(tris), len(boundary))
            tris = np.vstack([tris, np.zeros((grow, 3), dtype=int)])
            alive = np.concatenate([alive, np.zeros(grow, dtype=bool)])
        for a, b in boundary:
            tris[count] = (a, b, k)
            alive[count] = True
            count += 1

    final = tris[:count][alive[:count]]
    final = final[(final < n).all(axis=1)]
    triangles = sorted(tuple(int(i) for i in t) for t in final)
    vertices = [(P[k].copy(), int(ids[k])) for k in range(n)]
    logger.debug("delaunay: %d vertices, %d triangles", n, len(triangles))
    return Triangulation2D(vertices=vertices, triangles=triangles)


# --------------------------------------------------------------------------
# 3D mesh
# --------------------------------------------------------------------------

def canonical_normal(n: np.ndarray) -> np.ndarray:
    """Orient so n.z >= 0, ties broken by n.x >= 0 then n.y >= 0."""
    for axis in (2, 0, 1):
        if n[axis] < -NORMAL_TIE:
            return -n
        if n[axis] > NORMAL_TIE:
            return n
    return n


@dataclass(frozen=True, eq=False)
class MeshFace:
    vertex_ids: tuple[int, int, int]
    vertices: np.ndarray  # 3x3, one world point per row
    normal: np.ndarray
    centroid: np.ndarray

    @property
    def height(self) -> float:
        return float(self.centroid[2])


@dataclass(frozen=True)
class Mesh3D:
    faces: list[MeshFace] = field(default_factory=list)

    def __len__(self):
        return len(self.faces)

    def to_ply(self) -> str:
        """ASCII PLY with shared vertices keyed by landmark id."""
        index: dict[int, int] = {}
        verts: list[np.ndarray] = []
        face_rows = []
        for f in self.faces:
            row = []
            for lid, X in zip(f.vertex_ids, f.vertices):
                if lid not in index:
                    index[lid] = len(verts)
                    verts.append(X)
                row.append(index[lid])
            face_rows.append(row)
        lines = [
            "ply", "format ascii 1.0",
            f"element vertex {len(verts)}",
            "property float x", "property float y", "property float z",
            f"element face {len(face_rows)}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
        lines += [f"{X[0]:.6f} {X[1]:.6f} {X[2]:.6f}" for X in verts]
        lines += [f"3 {a} {b} {c}" for a, b, c in face_rows]
        return "\n".join(lines) + "\n"

    def save_ply(self, path: str | Path):
        Path(path).write_text(self.to_ply())


def lift_to_3d(
    tri: Triangulation2D,
    depths: dict[int, float],
    T_wc: Pose,
    cam: CameraIntrinsics,
    max_edge_3d: float = 0.5,
) -> Mesh3D:
    """Backproject triangulation vertices with their inverse depths; drop long-edged faces."""
    ids = tri.ids()
    rho = []
    for lid in ids:
        d = depths.get(lid)
        if d is None or not np.isfinite(d) or d <= 0:
            raise MissingDepth(f"landmark {lid} has no valid inverse depth")
        rho.append(d)
    X_w = T_wc.apply(cam.rays(tri.pixels()) / np.asarray(rho)[:, None])

    faces = []
    dropped = 0
    for a, b, c in tri.triangles:
        V = X_w[[a, b, c]]
        edges = np.linalg.norm(V - V[[1, 2, 0]], axis=1)
        if edges.max() > max_edge_3d:
            dropped += 1
            continue
        n = np.cross(V[1] - V[0], V[2] - V[0])
        norm = np.linalg.norm(n)
        if norm < 1e-15:
            dropped += 1
            continue
        faces.append(MeshFace(
            vertex_ids=(ids[a], ids[b], ids[c]),
            vertices=V,
            normal=canonical_normal(n / norm),
            centroid=V.mean(axis=0),
        ))
    logger.debug("lift: %d faces kept, %d dropped", len(faces), dropped)
    return Mesh3D(faces)

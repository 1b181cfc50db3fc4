import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial import ConvexHull

from planevio.errors import AllCollinear, MissingDepth, TooFewPoints
from planevio.services.geometry import Pose
from planevio.services.meshing import canonical_normal, delaunay2d, incircle, lift_to_3d, orient2d


def test_square_gives_two_triangles():
    tri = delaunay2d([[0, 0], [10, 0], [0, 10], [10, 11]])
    assert len(tri.triangles) == 2
    assert sorted(tri.ids()) == [0, 1, 2, 3]


def test_empty_circumcircles(rng):
    pts = rng.uniform(0, 100, (200, 2))
    tri = delaunay2d(pts)
    P = tri.pixels()
    for a, b, c in tri.triangles:
        sign = np.sign(orient2d(P[a], P[b], P[c]))
        assert sign != 0
        for k in range(len(P)):
            if k in (a, b, c):
                continue
            assert sign * incircle(P[a], P[b], P[c], P[k]) <= 1e-6


def test_covers_convex_hull(rng):
    pts = rng.uniform(0, 50, (60, 2))
    tri = delaunay2d(pts)
    P = tri.pixels()
    area = sum(abs(orient2d(P[a], P[b], P[c])) / 2 for a, b, c in tri.triangles)
    assert area == pytest.approx(ConvexHull(pts).volume, rel=1e-2)


def test_input_order_does_not_matter(rng):
    pts = rng.uniform(0, 80, (40, 2))
    ids = np.arange(100, 140)
    perm = rng.permutation(40)
    a = delaunay2d(pts, ids)
    b = delaunay2d(pts[perm], ids[perm])
    assert a.triangles == b.triangles
    assert a.ids() == b.ids()


def test_duplicates_are_merged():
    tri = delaunay2d([[0, 0], [0, 0], [5, 0], [0, 5]])
    assert len(tri.vertices) == 3
    assert len(tri.triangles) == 1


def test_degenerate_inputs():
    with pytest.raises(TooFewPoints):
        delaunay2d([[0, 0], [1, 1]])
    with pytest.raises(TooFewPoints):
        delaunay2d([[0, 0], [0, 0], [1, 1]])
    with pytest.raises(AllCollinear):
        delaunay2d([[0, 0], [1, 1], [2, 2], [3, 3]])


def test_canonical_normal():
    assert_allclose(canonical_normal(np.array([0.0, 0.0, -1.0])), [0, 0, 1])
    assert_allclose(canonical_normal(np.array([-1.0, 0.0, 0.0])), [1, 0, 0])
    assert_allclose(canonical_normal(np.array([0.0, -1.0, 0.0])), [0, 1, 0])


def test_lift_fronto_parallel(cam, rng):
    pixels = rng.uniform([5, 5], [155, 115], (50, 2))
    tri = delaunay2d(pixels)
    mesh = lift_to_3d(tri, {i: 0.5 for i in tri.ids()}, Pose.identity(), cam, max_edge_3d=10.0)
    assert len(mesh) == len(tri.triangles)
    for f in mesh.faces:
        assert_allclose(f.normal, [0, 0, 1], atol=1e-9)
        assert f.centroid[2] == pytest.approx(2.0)


def test_lift_drops_long_edges(cam):
    tri = delaunay2d([[10, 10], [150, 10], [10, 110], [150, 110]])
    mesh = lift_to_3d(tri, {i: 0.5 for i in range(4)}, Pose.identity(), cam, max_edge_3d=0.5)
    assert len(mesh) == 0


def test_lift_needs_every_depth(cam):
    tri = delaunay2d([[10, 10], [50, 10], [10, 50]])
    with pytest.raises(MissingDepth):
        lift_to_3d(tri, {0: 1.0, 1: 1.0}, Pose.identity(), cam)
    with pytest.raises(MissingDepth):
        lift_to_3d(tri, {0: 1.0, 1: 1.0, 2: -1.0}, Pose.identity(), cam)


def test_ply_shares_vertices(cam):
    tri = delaunay2d([[10, 10], [20, 10], [10, 20], [20, 21]])
    mesh = lift_to_3d(tri, {i: 1.0 for i in range(4)}, Pose.identity(), cam)
    text = mesh.to_ply()
    assert "element vertex 4" in text
    assert "element face 2" in text
    assert text.splitlines()[-1].startswith("3 ")

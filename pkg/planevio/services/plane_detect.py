"""Histogram plane detection over mesh faces, plane registry, and point association.

Horizontal planes come from a 1D histogram of face heights. Vertical planes come
from a 2D histogram over (normal azimuth, signed distance) whose azimuth axis is
cyclic. Both histograms are smoothed with an unnormalized Gaussian kernel (center
weight 1) so that a peak's smoothed value stays comparable to a face count.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from planevio.services.geometry import HorizontalPlane, MinimalPlane, VerticalPlane, wrap_angle
from planevio.services.meshing import Mesh3D, MeshFace

logger = logging.getLogger(__name__)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(3.0 * sigma))
    j = np.arange(-radius, radius + 1, dtype=float)
    return np.exp(-0.5 * (j / sigma) ** 2)


def _local_maxima(s: np.ndarray, wrap_axis0: bool = False) -> np.ndarray:
    """Peaks over the 8-neighborhood (2-neighborhood in 1D).

    Plateaus resolve to their first cell: a cell must beat earlier neighbors
    strictly and later neighbors or ties.
    """
    if s.ndim == 1:
        padded = np.pad(s, 1, constant_values=-np.inf)
        return (s > padded[:-2]) & (s >= padded[2:])

    padded = np.pad(s, ((0, 0), (1, 1)), constant_values=-np.inf)
    if wrap_axis0:
        padded = np.concatenate([padded[-1:], padded, padded[:1]], axis=0)
    else:
        padded = np.pad(padded, ((1, 1), (0, 0)), constant_values=-np.inf)
    rows, cols = s.shape
    peak = np.ones_like(s, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if (di, dj) == (0, 0):
                continue
            nb = padded[1 + di:1 + di + rows, 1 + dj:1 + dj + cols]
            peak &= (s > nb) if (di, dj) < (0, 0) else (s >= nb)
    return peak


# --------------------------------------------------------------------------
# Histograms
# --------------------------------------------------------------------------

@dataclass
class Histogram1D:
    bin_width: float
    origin: float = 0.0
    counts: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_values(cls, values, bin_width: float, origin: float = 0.0) -> Histogram1D:
        hist = cls(bin_width, origin)
        for i in np.rint((np.asarray(values, dtype=float) - origin) / bin_width).astype(int):
            hist.counts[int(i)] = hist.counts.get(int(i), 0) + 1
        return hist

    def bin_of(self, values) -> np.ndarray:
        return np.rint((np.asarray(values, dtype=float) - self.origin) / self.bin_width).astype(int)

    def center(self, i: int) -> float:
        return self.origin + i * self.bin_width

    def dense(self, pad: int) -> tuple[int, np.ndarray]:
        lo, hi = min(self.counts) - pad, max(self.counts) + pad
        arr = np.zeros(hi - lo + 1)
        for i, c in self.counts.items():
            arr[i - lo] = c
        return lo, arr

    def __add__(self, other: Histogram1D) -> Histogram1D:
        out = Histogram1D(self.bin_width, self.origin, dict(self.counts))
        for i, c in other.counts.items():
            out.counts[i] = out.counts.get(i, 0) + c
        return out


@dataclass
class Histogram2D:
    azimuth_bin_width: float
    distance_bin_width: float
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        # azimuth bins tile the circle exactly
        self.n_azimuth = max(1, round(2.0 * math.pi / self.azimuth_bin_width))
        self.azimuth_bin_width = 2.0 * math.pi / self.n_azimuth

    def azimuth_bin(self, phi) -> np.ndarray:
        return np.mod(np.rint(np.asarray(phi, dtype=float) / self.azimuth_bin_width).astype(int), self.n_azimuth)

    def distance_bin(self, d) -> np.ndarray:
        return np.rint(np.asarray(d, dtype=float) / self.distance_bin_width).astype(int)

    def add_votes(self, phi, d):
        for i, j in zip(self.azimuth_bin(phi), self.distance_bin(d)):
            key = (int(i), int(j))
            self.counts[key] = self.counts.get(key, 0) + 1

    def azimuth_center(self, i: int) -> float:
        return wrap_angle(i * self.azimuth_bin_width)

    def distance_center(self, j: int) -> float:
        return j * self.distance_bin_width

    def dense(self, pad: int) -> tuple[int, np.ndarray]:
        js = [j for _, j in self.counts]
        lo, hi = min(js) - pad, max(js) + pad
        arr = np.zeros((self.n_azimuth, hi - lo + 1))
        for (i, j), c in self.counts.items():
            arr[i, j - lo] = c
        return lo, arr

    def __add__(self, other: Histogram2D) -> Histogram2D:
        out = Histogram2D(self.azimuth_bin_width, self.distance_bin_width, dict(self.counts))
        for k, c in other.counts.items():
            out.counts[k] = out.counts.get(k, 0) + c
        return out


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------

@dataclass
class DetectedPlane:
    params: MinimalPlane
    support: int
    member_points: set[int] = field(default_factory=set)

    @property
    def kind(self) -> str:
        return self.params.kind

    def to_dict(self) -> dict:
        return {**self.params.to_dict(), "support": self.support, "n_points": len(self.member_points)}


def classify_faces(mesh: Mesh3D, angle_tol: float) -> tuple[list[MeshFace], list[MeshFace], list[MeshFace]]:
    horizontal, vertical, other = [], [], []
    cos_tol, sin_tol = math.cos(angle_tol), math.sin(angle_tol)
    for f in mesh.faces:
        nz = abs(float(f.normal[2]))
        if nz >= cos_tol:
            horizontal.append(f)
        elif nz <= sin_tol:
            vertical.append(f)
        else:
            other.append(f)
    return horizontal, vertical, other


def horizontal_peaks(
    faces: list[MeshFace], sigma_t: int, bin_width: float, smooth_sigma: float,
) -> list[tuple[HorizontalPlane, int]]:
    """Detected horizontal planes with their raw face support."""
    if not faces:
        return []
    heights = np.array([f.height for f in faces])
    hist = Histogram1D.from_values(heights, bin_width)
    kernel = gaussian_kernel(smooth_sigma)
    lo, raw = hist.dense(pad=len(kernel))
    smooth = convolve1d(raw, kernel, mode="constant")
    support = convolve1d(raw, np.ones(3), mode="constant")
    peaks = np.flatnonzero(_local_maxima(smooth) & (smooth > sigma_t) & (support >= sigma_t))

    bins = hist.bin_of(heights)
    out = []
    for k in peaks:
        i = int(k) + lo
        near = np.abs(bins - i) <= 1
        height = float(heights[near].mean())
        out.append((HorizontalPlane(-height), int(near.sum())))
        logger.debug("horizontal peak at bin %d: height %.4f, support %d", i, height, near.sum())
    return out


def detect_horizontal(faces, sigma_t: int, bin_width: float, smooth_sigma: float) -> list[HorizontalPlane]:
    return [p for p, _ in horizontal_peaks(faces, sigma_t, bin_width, smooth_sigma)]


def _vertical_votes(faces: list[MeshFace]) -> tuple[np.ndarray, np.ndarray]:
    """(phi, d) per face with the horizontal normal canonicalized to x >= 0 (tie y >= 0)."""
    n = np.array([f.normal[:2] for f in faces], dtype=float)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = (n[:, 0] < 0) | ((n[:, 0] == 0) & (n[:, 1] < 0))
    n[flip] *= -1
    c = np.array([f.centroid[:2] for f in faces], dtype=float)
    return np.arctan2(n[:, 1], n[:, 0]), -(n * c).sum(axis=1)


def vertical_peaks(
    faces: list[MeshFace], sigma_t: int, azimuth_bin: float, distance_bin: float, smooth_sigma: float,
) -> list[tuple[VerticalPlane, int]]:
    """Detected vertical planes with their raw face support.

    Each face votes for both (phi, d) and (phi + pi, -d), the two parameterizations
    of one plane, so clusters near phi = +-pi/2 are never split by the orientation
    rule. Only the representative with phi in (-pi/2, pi/2] is reported.
    """
    if not faces:
        return []
    phi, d = _vertical_votes(faces)
    vote_phi = np.concatenate([phi, np.array([wrap_angle(a + math.pi) for a in phi])])
    vote_d = np.concatenate([d, -d])

    hist = Histogram2D(azimuth_bin, distance_bin)
    hist.add_votes(vote_phi, vote_d)
    kernel = gaussian_kernel(smooth_sigma)
    lo, raw = hist.dense(pad=len(kernel))
    smooth = convolve1d(raw, kernel, axis=0, mode="wrap")
    smooth = convolve1d(smooth, kernel, axis=1, mode="constant")
    support = convolve1d(convolve1d(raw, np.ones(3), axis=0, mode="wrap"), np.ones(3), axis=1, mode="constant")
    peaks = np.argwhere(_local_maxima(smooth, wrap_axis0=True) & (smooth > sigma_t) & (support >= sigma_t))

    ai, dj = hist.azimuth_bin(vote_phi), hist.distance_bin(vote_d)
    out = []
    for i, j in peaks:
        center_phi = hist.azimuth_center(int(i))
        if not (-math.pi / 2 + 1e-9 < center_phi <= math.pi / 2 + 1e-9):
            continue
        j = int(j) + lo
        da = np.abs(ai - i)
        near = (np.minimum(da, hist.n_azimuth - da) <= 1) & (np.abs(dj - j) <= 1)
        offsets = np.array([wrap_angle(a - center_phi) for a in vote_phi[near]])
        plane = VerticalPlane(center_phi + float(offsets.mean()), float(vote_d[near].mean()))
        out.append((plane, int(near.sum())))
        logger.debug("vertical peak at (%d, %d): phi %.4f d %.4f support %d", i, j, plane.phi, plane.d, near.sum())
    return out


def detect_vertical(faces, sigma_t: int, azimuth_bin: float, distance_bin: float, smooth_sigma: float) -> list[VerticalPlane]:
    return [p for p, _ in vertical_peaks(faces, sigma_t, azimuth_bin, distance_bin, smooth_sigma)]


def associate_points(mesh: Mesh3D, plane: DetectedPlane | MinimalPlane, point_dist_tol: float, angle_tol: float) -> set[int]:
    """Landmarks that are vertices of at least one face lying on the plane."""
    params = plane.params if isinstance(plane, DetectedPlane) else plane
    g = params.to_general()
    cos_tol = math.cos(angle_tol)
    members: set[int] = set()
    for f in mesh.faces:
        if abs(float(f.normal @ g.n)) < cos_tol:
            continue
        if np.all(np.abs(g.incidence(f.vertices)) <= point_dist_tol):
            members.update(f.vertex_ids)
    return members


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------

def plane_distance(a: MinimalPlane, b: MinimalPlane) -> tuple[float, float, bool]:
    """(angle, distance, flipped) between same-kind planes; flipped means b matched as (phi + pi, -d)."""
    if a.kind == "horizontal":
        return 0.0, abs(a.d - b.d), False
    direct = (abs(wrap_angle(a.phi - b.phi)), abs(a.d - b.d))
    mirrored = (abs(wrap_angle(a.phi - b.phi - math.pi)), abs(a.d + b.d))
    if mirrored[0] + mirrored[1] < direct[0] + direct[1]:
        return mirrored[0], mirrored[1], True
    return direct[0], direct[1], False


def _weighted_merge(a: MinimalPlane, wa: int, b: MinimalPlane, wb: int, flipped: bool) -> MinimalPlane:
    s = wb / max(wa + wb, 1)
    if a.kind == "horizontal":
        return HorizontalPlane(a.d + s * (b.d - a.d))
    phi_b, d_b = (b.phi + math.pi, -b.d) if flipped else (b.phi, b.d)
    return VerticalPlane(a.phi + s * wrap_angle(phi_b - a.phi), a.d + s * (d_b - a.d))


class PlaneRegistry:
    """All planes ever detected, keyed by stable ids. Retired planes stay as history."""

    def __init__(self):
        self.planes: dict[int, DetectedPlane] = {}
        self.active: dict[int, bool] = {}
        self.absorbed: dict[int, int] = {}
        self._next_id = 0

    def __len__(self):
        return len(self.planes)

    def __getitem__(self, pid: int) -> DetectedPlane:
        return self.planes[pid]

    def insert(self, plane: DetectedPlane) -> int:
        pid = self._next_id
        self._next_id += 1
        self.planes[pid] = plane
        self.active[pid] = True
        return pid

    def active_ids(self, kind: str | None = None) -> list[int]:
        return [i for i, on in self.active.items() if on and (kind is None or self.planes[i].kind == kind)]

    def is_active(self, pid: int) -> bool:
        return self.active.get(pid, False)

    def deactivate(self, pid: int):
        self.active[pid] = False

    def update_params(self, pid: int, params: MinimalPlane):
        self.planes[pid].params = params

    def resolve(self, pid: int) -> int:
        """Follow absorption links to the surviving id."""
        while pid in self.absorbed:
            pid = self.absorbed[pid]
        return pid

    def _absorb(self, target: int, source: int, flipped: bool):
        t, s = self.planes[target], self.planes[source]
        t.params = _weighted_merge(t.params, t.support, s.params, s.support, flipped)
        t.support += s.support
        t.member_points |= s.member_points
        self.active[source] = False
        self.absorbed[source] = target
        logger.info("plane %d absorbed into plane %d", source, target)

    def _match(self, candidate: DetectedPlane, ids, angle_thresh, dist_thresh, exclude=None):
        best, best_key = None, None
        for pid in ids:
            if pid == exclude:
                continue
            existing = self.planes[pid]
            if existing.kind != candidate.kind:
                continue
            angle, dist, flipped = plane_distance(existing.params, candidate.params)
            if angle <= angle_thresh and dist <= dist_thresh:
                key = (angle + dist, pid)
                if best_key is None or key < best_key:
                    best, best_key = (pid, flipped), key
        return best

    def to_report(self) -> list[dict]:
        return [{"id": pid, "active": self.active[pid], **p.to_dict()} for pid, p in self.planes.items()]

    def to_json(self) -> str:
        return json.dumps(self.to_report(), indent=2)


def merge_or_insert(reg: PlaneRegistry, candidate: DetectedPlane, angle_thresh: float, dist_thresh: float) -> int:
    """Merge into a matching active plane, revive a matching historical plane, or insert."""
    match = reg._match(candidate, reg.active_ids(), angle_thresh, dist_thresh)
    if match is None:
        historical = [i for i, on in reg.active.items() if not on and i not in reg.absorbed]
        match = reg._match(candidate, historical, angle_thresh, dist_thresh)
        if match is not None:
            reg.active[match[0]] = True
            logger.info("plane %d re-detected, reactivated", match[0])
    if match is None:
        pid = reg.insert(DetectedPlane(candidate.params, candidate.support, set(candidate.member_points)))
        logger.info("new %s plane %d: %s", candidate.kind, pid, candidate.params)
        return pid

    pid, flipped = match
    target = reg.planes[pid]
    target.params = _weighted_merge(target.params, target.support, candidate.params, candidate.support, flipped)
    target.support += candidate.support
    target.member_points |= candidate.member_points

    # the averaged plane may now sit within threshold of another active plane
    while (other := reg._match(target, reg.active_ids(), angle_thresh, dist_thresh, exclude=pid)) is not None:
        oid, oflip = other
        reg._absorb(pid, oid, oflip)
    return pid


def detect_planes(mesh: Mesh3D, est) -> list[DetectedPlane]:
    """Full detection pass with associated members; `est` is an EstimatorSection."""
    angle_tol = math.radians(est.angle_tol_deg)
    horizontal, vertical, _ = classify_faces(mesh, angle_tol)
    found = horizontal_peaks(horizontal, est.sigma_t, est.height_bin, est.smooth_sigma)
    found += vertical_peaks(vertical, est.sigma_t, math.radians(est.azimuth_bin_deg), est.distance_bin, est.smooth_sigma)
    planes = []
    for params, support in found:
        plane = DetectedPlane(params, support)
        plane.member_points = associate_points(mesh, plane, est.point_dist_tol, angle_tol)
        planes.append(plane)
    logger.info("detected %d horizontal, %d vertical planes from %d faces",
                sum(p.kind == "horizontal" for p in planes), sum(p.kind == "vertical" for p in planes), len(mesh))
    return planes


def detection_report(planes: list[DetectedPlane]) -> str:
    return json.dumps([p.to_dict() for p in planes], indent=2)

"""Mesh ingestion, surface sampling, bounding volumes and neighbor graphs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

PathLike = Union[str, Path]

DEGENERATE_AREA = 1e-14


class MeshFormatError(ValueError):
    """Raised for unreadable or malformed mesh / point files."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshFormatError("non-finite vertex coordinates")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshFormatError(
                f"face index out of range for {len(self.vertices)} vertices")
        if self.face_labels is not None:
            self.face_labels = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)
            if len(self.face_labels) != len(self.faces):
                raise MeshFormatError(
                    f"{len(self.face_labels)} labels for {len(self.faces)} faces")

    @property
    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of face corner positions."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, length, out=np.zeros_like(n), where=length > 0)

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    @property
    def degenerate(self) -> np.ndarray:
        """Boolean flag per face: True for (near) zero-area faces."""
        return self.face_areas() <= DEGENERATE_AREA

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "TriangleMesh":
        v = self.vertices @ np.asarray(rotation, dtype=np.float64).T + np.asarray(translation)
        return TriangleMesh(v, self.faces.copy(),
                            None if self.face_labels is None else self.face_labels.copy())


@dataclass
class PointSample:
    position: np.ndarray
    normal: np.ndarray
    face_id: int
    label: Optional[int] = None


@dataclass
class SampleSet:
    """Array-backed list of PointSample; indexing yields PointSample views."""
    positions: np.ndarray
    normals: np.ndarray
    face_ids: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> PointSample:
        label = None if self.labels is None else int(self.labels[i])
        return PointSample(self.positions[i], self.normals[i], int(self.face_ids[i]), label)

    def __iter__(self) -> Iterator[PointSample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.positions[idx], self.normals[idx], self.face_ids[idx],
                         None if self.labels is None else self.labels[idx])


@dataclass
class BoundingSphere:
    center: np.ndarray
    radius: float


@dataclass
class OrientedBoundingBox:
    center: np.ndarray
    axes: np.ndarray  # rows are unit axes
    half_extents: np.ndarray

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.axes


@dataclass
class NeighborGraph:
    neighbors: np.ndarray  # (n, k) int
    k: int

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        """Directed edge list (i, neighbors[i, j])."""
        n = len(self.neighbors)
        return np.repeat(np.arange(n), self.k), self.neighbors.reshape(-1)


# --------------------------------------------------------------------------- io

def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    raw = token.split("/")[0]
    try:
        idx = int(raw)
    except ValueError:
        raise MeshFormatError(f"line {lineno}: bad face index {token!r}") from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if idx < 0 or idx >= n_vertices:
        raise MeshFormatError(
            f"line {lineno}: face index {token!r} out of range ({n_vertices} vertices so far)")
    return idx


def load_mesh(path: PathLike, labels_path: Optional[PathLike] = None) -> TriangleMesh:
    """Read a Wavefront OBJ file, fan-triangulating polygons.

    If ``labels_path`` is given it holds one integer per face (either per
    source polygon or per output triangle).
    """
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise MeshFormatError(f"{path}: not a text file ({exc})") from exc

    vertices: List[Tuple[float, float, float]] = []
    faces: List[Tuple[int, int, int]] = []
    polygon_of_face: List[int] = []
    n_polygons = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"{path}: line {lineno}: vertex needs 3 coordinates")
            try:
                xyz = tuple(float(p) for p in parts[1:4])
            except ValueError:
                raise MeshFormatError(f"{path}: line {lineno}: bad vertex {line.strip()!r}") from None
            if not all(np.isfinite(xyz)):
                raise MeshFormatError(f"{path}: line {lineno}: non-finite vertex coordinate")
            vertices.append(xyz)
        elif parts[0] == "f":
            if len(parts) < 4:
                raise MeshFormatError(f"{path}: line {lineno}: face needs at least 3 vertices")
            try:
                idx = [_parse_index(p, len(vertices), lineno) for p in parts[1:]]
            except MeshFormatError as exc:
                raise MeshFormatError(f"{path}: {exc}") from None
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                polygon_of_face.append(n_polygons)
            n_polygons += 1

    labels = None
    if labels_path is not None:
        raw = load_labels(labels_path)
        if len(raw) == len(faces):
            labels = raw
        elif len(raw) == n_polygons:
            labels = raw[np.asarray(polygon_of_face, dtype=np.int64)]
        else:
            raise MeshFormatError(
                f"{labels_path}: {len(raw)} labels, expected {n_polygons} polygons "
                f"or {len(faces)} triangles")
    return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3), labels)


def load_labels(path: PathLike) -> np.ndarray:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise MeshFormatError(f"{path}: line {lineno}: bad label {line!r}") from None
    return np.array(out, dtype=np.int64)


def save_mesh(mesh: TriangleMesh, path: PathLike, labels_path: Optional[PathLike] = None) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
    if labels_path is not None and mesh.face_labels is not None:
        Path(labels_path).write_text("".join(f"{int(l)}\n" for l in mesh.face_labels))


def load_xyz(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Read ``x y z [nx ny nz]`` lines. Normals are returned only if every line has them."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) not in (3, 6):
            raise MeshFormatError(f"{path}: line {lineno}: expected 3 or 6 numbers")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise MeshFormatError(f"{path}: line {lineno}: bad number in {line.strip()!r}") from None
    if not rows:
        raise MeshFormatError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if widths == {6}:
        arr = np.array(rows)
        pts, nrm = arr[:, :3], arr[:, 3:]
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.divide(nrm, length, out=np.zeros_like(nrm), where=length > 0)
    else:
        pts, nrm = np.array([r[:3] for r in rows]), None
    if not np.all(np.isfinite(pts)):
        raise MeshFormatError(f"{path}: non-finite coordinates")
    return pts, nrm


def save_xyz(path: PathLike, points: np.ndarray, extra: Optional[np.ndarray] = None,
             fmt: str = "%.9g") -> None:
    data = points if extra is None else np.hstack([points, extra])
    np.savetxt(path, data, fmt=fmt)


# --------------------------------------------------------------------- sampling

def area_weighted_sample(mesh: TriangleMesh, n: int, seed: int) -> SampleSet:
    if n < 1:
        raise ValueError("n must be positive")
    areas = mesh.face_areas()
    areas = np.where(areas > DEGENERATE_AREA, areas, 0.0)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no non-degenerate faces")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    face_ids = np.searchsorted(cdf, rng.random(n), side="right")
    face_ids = np.minimum(face_ids, len(areas) - 1)
    # guard against landing on a trailing zero-area face through rounding
    while np.any(areas[face_ids] == 0):
        bad = areas[face_ids] == 0
        face_ids[bad] = np.searchsorted(cdf, rng.random(bad.sum()), side="right")
        face_ids = np.minimum(face_ids, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    tri = mesh.triangles[face_ids]
    pos = np.einsum("ij,ijk->ik", w, tri)
    normals = mesh.face_normals()[face_ids]
    labels = None if mesh.face_labels is None else mesh.face_labels[face_ids].copy()
    return SampleSet(pos, normals, face_ids.astype(np.int64), labels)


# ------------------------------------------------------------- bounding volumes

def _ritter(points: np.ndarray) -> Tuple[np.ndarray, float]:
    p0 = points[0]
    a = points[np.argmax(((points - p0) ** 2).sum(1))]
    b = points[np.argmax(((points - a) ** 2).sum(1))]
    center = (a + b) / 2
    radius = np.linalg.norm(b - a) / 2
    for p in points:
        d = np.linalg.norm(p - center)
        if d > radius:
            new_r = (radius + d) / 2
            center = center + (p - center) * ((new_r - radius) / d)
            radius = new_r
    return center, float(np.sqrt(((points - center) ** 2).sum(1).max()))


def bounding_sphere(mesh_or_points, iterations: int = 1000) -> BoundingSphere:
    """Enclosing sphere within 5% of the minimal one.

    Ritter's two-pass sphere, then Badoiu-Clarkson core-set iterations; the
    smaller of the two is returned, radius always re-measured so every point
    is contained.
    """
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriangleMesh) else mesh_or_points
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty mesh")
    c_r, r_r = _ritter(pts)
    c = pts.mean(axis=0)
    for i in range(1, iterations + 1):
        far = pts[np.argmax(((pts - c) ** 2).sum(1))]
        c = c + (far - c) / (i + 1)
    r_bc = float(np.sqrt(((pts - c) ** 2).sum(1).max()))
    if r_bc < r_r:
        return BoundingSphere(c, r_bc)
    return BoundingSphere(c_r, r_r)


def _fix_signs(axes: np.ndarray) -> np.ndarray:
    axes = axes.copy()
    for i in range(len(axes)):
        nz = np.flatnonzero(np.abs(axes[i]) > 1e-12)
        if len(nz) and axes[i, nz[0]] < 0:
            axes[i] = -axes[i]
    return axes


def principal_axes(points: np.ndarray) -> np.ndarray:
    """Rows: covariance eigenvectors by descending eigenvalue, sign-normalized."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cov = np.cov(pts.T, bias=True) if len(pts) > 1 else np.zeros((3, 3))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    return _fix_signs(evecs[:, order].T)


def compute_obb(points) -> OrientedBoundingBox:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("compute_obb needs at least one point")
    axes = principal_axes(pts)
    local = pts @ axes.T
    lo, hi = local.min(axis=0), local.max(axis=0)
    center = ((lo + hi) / 2) @ axes
    return OrientedBoundingBox(center, axes, (hi - lo) / 2)


# ------------------------------------------------------------------ neighbors

def _brute_knn_rows(points: np.ndarray, rows: np.ndarray, k: int) -> np.ndarray:
    d = ((points[rows, None, :] - points[None, :, :]) ** 2).sum(-1)
    d[np.arange(len(rows)), rows] = np.inf
    idx = np.broadcast_to(np.arange(len(points)), d.shape)
    out = np.empty((len(rows), k), dtype=np.int64)
    for r in range(len(rows)):
        order = np.lexsort((idx[r], d[r]))
        out[r] = order[:k]
    return out


def knn_graph(points, k: int) -> NeighborGraph:
    """Exact k-nearest neighbors, ties broken by lower index, no self loops."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if k < 1 or k >= n:
        raise ValueError(f"k={k} must satisfy 1 <= k < point count ({n})")
    extra = min(n - 1, k + 8)
    tree = cKDTree(pts)
    _, cand = tree.query(pts, k=extra + 1)
    cand = np.asarray(cand).reshape(n, -1)
    out = np.empty((n, k), dtype=np.int64)
    fallback = []
    for i in range(n):
        c = cand[i][cand[i] != i][:extra]
        c = c[c < n]
        d = ((pts[c] - pts[i]) ** 2).sum(1)
        order = np.lexsort((c, d))
        c, d = c[order], d[order]
        # exact only if the k-th distance is strictly inside the candidate radius
        if len(c) < n - 1 and d[k - 1] >= d[-1]:
            fallback.append(i)
            continue
        out[i] = c[:k]
    if fallback:
        rows = np.array(fallback)
        for s in range(0, len(rows), 256):
            out[rows[s:s + 256]] = _brute_knn_rows(pts, rows[s:s + 256], k)
    return NeighborGraph(out, k)


def closest_points(query: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index of and squared distance to the nearest reference point for each query."""
    tree = cKDTree(reference)
    d, idx = tree.query(query, k=1)
    return np.asarray(idx, dtype=np.int64), np.asarray(d) ** 2


def _closest_on_triangles(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Closest point to ``p`` on each triangle (Voronoi-region case analysis)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = (ab * ap).sum(1), (ac * ap).sum(1)
    bp = p - b
    d3, d4 = (ab * bp).sum(1), (ac * bp).sum(1)
    cp = p - c
    d5, d6 = (ab * cp).sum(1), (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]                  # interior
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None]),
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + (c - b) * t_bc[:, None]),
    ]
    done = np.zeros(len(tris), dtype=bool)
    for mask, pts in cases:
        m = mask & ~done
        out[m] = pts[m]
        done |= m
    return out


def closest_point_on_mesh(mesh: TriangleMesh, points: np.ndarray) -> SampleSet:
    """Project points onto the mesh surface: position, face normal and face id."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles
    pos = np.empty_like(points)
    fid = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        q = _closest_on_triangles(p, tris)
        j = int(np.argmin(((q - p) ** 2).sum(1)))
        pos[i], fid[i] = q[j], j
    labels = None if mesh.face_labels is None else mesh.face_labels[fid]
    return SampleSet(pos, mesh.face_normals()[fid], fid, labels)

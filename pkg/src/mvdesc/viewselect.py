"""Per-point viewpoint selection and multi-scale view stacks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .geometry import BoundingSphere, PointSample, SampleSet, TriangleMesh, bounding_sphere
from .render import (Camera, DEFAULT_SHADING, ShadingParams, in_plane_rotate, point_cloud_visibility,
                     rasterize, render_point_cloud, sample_visibility, shade_fragments, splat, write_pgm)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class ZeroVisibilityError(RuntimeError):
    def __init__(self, point_id):
        super().__init__(f"point {point_id} is not visible from any sampled direction")
        self.point_id = point_id


@dataclass(frozen=True)
class ViewConfig:
    n_directions: int = 150
    n_medoids: int = 3
    radii: tuple = (0.25, 0.5, 0.75)
    n_inplane: int = 4
    resolution: int = 227
    vertical_fov_deg: float = 50.0
    visibility_resolution: int = 128
    kmedoids_restarts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_directions < 1 or self.n_medoids < 1:
            raise ValueError("n_directions and n_medoids must be positive")
        if self.n_medoids > self.n_directions:
            raise ValueError("n_medoids exceeds n_directions")
        radii = tuple(float(r) for r in self.radii)
        object.__setattr__(self, "radii", radii)
        if not radii or any(not 0 < r <= 2 for r in radii) or any(
                b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("radii must be strictly increasing values in (0, 2]")
        if self.n_inplane < 1:
            raise ValueError("n_inplane must be >= 1")

    @property
    def views_per_point(self) -> int:
        return self.n_medoids * len(self.radii) * self.n_inplane


@dataclass
class ViewDirection:
    vector: np.ndarray
    theta: float
    phi: float

    @classmethod
    def from_vector(cls, v) -> "ViewDirection":
        v = np.asarray(v, dtype=np.float64)
        v = v / np.linalg.norm(v)
        theta = float(np.arccos(np.clip(v[2], -1.0, 1.0)))
        phi = float(np.arctan2(v[1], v[0]) % (2 * np.pi))
        return cls(v, theta, phi)


@dataclass
class ViewStack:
    point_id: int
    images: np.ndarray             # (K*M*L, res, res)
    cameras: List[Camera]          # K*M base cameras
    camera_of_image: np.ndarray    # index into cameras per image
    rotation_of_image: np.ndarray  # quarter turns per image


# ------------------------------------------------------------------ directions

def sample_directions(n: int) -> np.ndarray:
    """Spherical Fibonacci lattice, (n, 3) unit vectors."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    phi = (i * GOLDEN_ANGLE) % (2 * np.pi)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def angular_distances(dirs: np.ndarray) -> np.ndarray:
    """Pairwise angles; atan2 form so identical directions give exactly 0."""
    d = np.asarray(dirs, dtype=np.float64)
    cross = np.linalg.norm(np.cross(d[:, None, :], d[None, :, :]), axis=-1)
    return np.arctan2(cross, d @ d.T)


def up_vector(direction: np.ndarray) -> np.ndarray:
    """World +z projected orthogonal to ``direction``; +x when nearly parallel."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(d @ ref) > 0.999:
        ref = np.array([1.0, 0.0, 0.0])
    u = ref - (ref @ d) * d
    return u / np.linalg.norm(u)


# --------------------------------------------------------------------- scenes

class MeshScene:
    """A triangle mesh plus the surface samples whose visibility we track."""

    def __init__(self, mesh: TriangleMesh, samples: SampleSet, shading: ShadingParams = DEFAULT_SHADING):
        self.mesh = mesh
        self.samples = samples
        self.shading = shading
        self.sphere = bounding_sphere(mesh)

    @property
    def positions(self) -> np.ndarray:
        return self.samples.positions

    def render(self, cam: Camera) -> np.ndarray:
        frags = rasterize(self.mesh, cam)
        return shade_fragments(self.mesh, cam, frags, None, self.shading).pixels

    def visibility(self, cam: Camera, idx=None) -> np.ndarray:
        samples = self.samples if idx is None else self.samples.subset(np.atleast_1d(idx))
        return sample_visibility(self.mesh, samples, cam)[0] >= 0


class CloudScene:
    """A point cloud rendered as small balls; every point is a sample."""

    def __init__(self, points: np.ndarray, normals: Optional[np.ndarray] = None,
                 ball_radius: Optional[float] = None, shading: ShadingParams = DEFAULT_SHADING):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.normals = normals
        self.sphere = bounding_sphere(self.points)
        self.ball_radius = ball_radius if ball_radius is not None else 0.01 * self.sphere.radius
        self.shading = shading

    @property
    def positions(self) -> np.ndarray:
        return self.points

    def render(self, cam: Camera) -> np.ndarray:
        return render_point_cloud(self.points, cam, self.ball_radius, self.normals,
                                  shading=self.shading).pixels

    def visibility(self, cam: Camera, idx=None) -> np.ndarray:
        frags = splat(self.points, cam, self.ball_radius)
        pts = self.points if idx is None else self.points[np.atleast_1d(idx)]
        return point_cloud_visibility(pts, cam, self.ball_radius, frags)


def direction_camera(sphere: BoundingSphere, direction: np.ndarray, resolution: int) -> Camera:
    """Orthographic camera looking at the shape center from ``direction``."""
    R = max(sphere.radius, 1e-12)
    d = np.asarray(direction, dtype=np.float64)
    return Camera(eye=sphere.center + 2.0 * R * d, target=sphere.center, up=up_vector(d),
                  resolution=resolution, near=0.5 * R, far=3.5 * R,
                  orthographic=True, ortho_half_height=1.01 * R)


def visible_directions(scene, dirs: np.ndarray, config: ViewConfig) -> List[np.ndarray]:
    """Per-sample arrays of indices of the directions the sample is seen from."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(scene.positions)
    vis = np.zeros((n, len(dirs)), dtype=bool)
    for j, d in enumerate(dirs):
        cam = direction_camera(scene.sphere, d, config.visibility_resolution)
        vis[:, j] = scene.visibility(cam)
    return [np.flatnonzero(row) for row in vis]


# ------------------------------------------------------------------ k-medoids

@dataclass
class KMedoidsResult:
    medoids: np.ndarray
    cost: float
    history: List[float] = field(default_factory=list)


def _cost(D: np.ndarray, medoids) -> float:
    return float(D[:, list(medoids)].min(axis=1).sum())


def _farthest_first(D: np.ndarray, first: int, K: int) -> List[int]:
    chosen = [first]
    mind = D[first].copy()
    for _ in range(1, K):
        cand = mind.copy()
        cand[chosen] = -np.inf
        chosen.append(int(np.argmax(cand)))
        mind = np.minimum(mind, D[chosen[-1]])
    return chosen


def _alternate(D: np.ndarray, medoids: List[int], max_iter: int, history: List[float]) -> List[int]:
    medoids = list(medoids)
    for _ in range(max_iter):
        assign = np.argmin(D[:, medoids], axis=1)
        new = []
        for j, m in enumerate(medoids):
            members = np.flatnonzero(assign == j)
            if len(members) == 0:
                new.append(m)
                continue
            within = D[np.ix_(members, members)].sum(axis=1)
            incumbent = np.flatnonzero(members == m)
            # keep the incumbent on ties so the loop terminates
            if incumbent.size and within[incumbent[0]] <= within.min():
                new.append(int(m))
            else:
                new.append(int(members[np.argmin(within)]))
        if len(set(new)) < len(new):
            new = medoids
        cost = _cost(D, new)
        if new == medoids:
            break
        if cost > history[-1]:
            break
        medoids = new
        history.append(cost)
    return medoids


def _swap(D: np.ndarray, medoids: List[int], history: List[float]) -> List[int]:
    medoids = list(medoids)
    n = len(D)
    cost = history[-1]
    while True:
        best = (cost, None, None)
        for j in range(len(medoids)):
            others = medoids[:j] + medoids[j + 1:]
            base = D[:, others].min(axis=1) if others else np.full(n, np.inf)
            costs = np.minimum(base[:, None], D).sum(axis=0)
            costs[medoids] = np.inf
            c = int(np.argmin(costs))
            if costs[c] < best[0] - 1e-12:
                best = (float(costs[c]), j, c)
        if best[1] is None:
            return medoids
        medoids[best[1]] = best[2]
        cost = best[0]
        history.append(cost)


def _pair_swap(D: np.ndarray, medoids: List[int], history: List[float]) -> List[int]:
    """Best simultaneous replacement of two medoids, repeated to a local optimum."""
    medoids = list(medoids)
    n, K = len(D), len(medoids)
    if K < 2:
        return medoids
    cost = history[-1]
    while True:
        best = (cost, None)
        for j1, j2 in itertools.combinations(range(K), 2):
            others = [m for j, m in enumerate(medoids) if j not in (j1, j2)]
            base = D[:, others].min(axis=1) if others else np.full(n, np.inf)
            pair = np.minimum(D[:, :, None], D[:, None, :])
            costs = np.minimum(pair, base[:, None, None]).sum(axis=0)
            costs[others, :] = np.inf
            costs[:, others] = np.inf
            np.fill_diagonal(costs, np.inf)
            c = np.unravel_index(np.argmin(costs), costs.shape)
            if costs[c] < best[0] - 1e-12:
                best = (float(costs[c]), (j1, j2, int(c[0]), int(c[1])))
        if best[1] is None:
            return medoids
        j1, j2, c1, c2 = best[1]
        medoids[j1], medoids[j2] = c1, c2
        cost = best[0]
        history.append(cost)


def kmedoids(D: np.ndarray, K: int, seed: int = 0, max_iter: int = 100,
             restarts: int = 4, random_restarts: int = 4) -> KMedoidsResult:
    """K-medoids on a precomputed distance matrix.

    Starts: farthest-first seeding from each of the ``restarts`` most central
    points, plus ``random_restarts`` seeded random K-subsets. Each start runs
    alternating assignment / medoid update and single-swap
    refinement per start. The best start is then polished with pair swaps.
    """
    n = len(D)
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= {n}, got {K}")
    if K == n:
        return KMedoidsResult(np.arange(n), 0.0, [0.0])
    rng = np.random.default_rng(seed)
    central = np.argsort(D.sum(axis=1), kind="stable")
    firsts = [int(i) for i in central[:max(restarts, 1)]]
    inits = [_farthest_first(D, f, K) for f in firsts]
    inits += [[int(i) for i in rng.choice(n, K, replace=False)] for _ in range(random_restarts)]
    best_med, best_hist = None, None
    for init in inits:
        history = [_cost(D, init)]
        med = _alternate(D, init, max_iter, history)
        med = _swap(D, med, history)
        if best_hist is None or history[-1] < best_hist[-1] - 1e-12 or (
                abs(history[-1] - best_hist[-1]) <= 1e-12 and sorted(med) < sorted(best_med)):
            best_med, best_hist = med, history
    history = list(best_hist)
    med = _pair_swap(D, best_med, history)
    med = _swap(D, med, history)
    return KMedoidsResult(np.array(sorted(med)), history[-1], history)


def kmedoids_directions(dirs: np.ndarray, K: int, seed: int = 0, **kw) -> np.ndarray:
    """Indices (into ``dirs``) of K medoid directions under angular distance."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if not 1 <= K <= len(dirs):
        raise ValueError(f"need 1 <= K <= {len(dirs)}")
    return kmedoids(angular_distances(dirs), K, seed, **kw).medoids


# -------------------------------------------------------------------- cameras

def build_cameras(point, medoid_dirs: np.ndarray, sphere: BoundingSphere,
                  config: ViewConfig) -> List[Camera]:
    pos = point.position if isinstance(point, PointSample) else np.asarray(point, dtype=np.float64)
    R = sphere.radius
    cams = []
    for d in np.asarray(medoid_dirs, dtype=np.float64).reshape(-1, 3):
        d = d / np.linalg.norm(d)
        up = up_vector(d)
        for r in config.radii:
            dist = r * R
            cams.append(Camera(eye=pos + d * dist, target=pos.copy(), up=up,
                               vertical_fov=np.deg2rad(config.vertical_fov_deg),
                               resolution=config.resolution,
                               near=0.01 * dist, far=(2.0 + r) * R * 1.01))
    return cams


def _stack_images(scene, cams: List[Camera], n_inplane: int):
    base = [scene.render(c) for c in cams]
    images, cam_of, rot_of = [], [], []
    for ci, img in enumerate(base):
        for q in range(n_inplane):
            images.append(in_plane_rotate(img, q))
            cam_of.append(ci)
            rot_of.append(q)
    return np.stack(images), np.array(cam_of), np.array(rot_of)


class ShapeViews:
    """Per-shape view selection: the direction visibility pass is done once and
    shared by every point's stack."""

    def __init__(self, scene, config: ViewConfig):
        self.scene = scene
        self.config = config
        self.directions = sample_directions(config.n_directions)
        self._visible: Optional[List[np.ndarray]] = None

    @property
    def visible(self) -> List[np.ndarray]:
        if self._visible is None:
            self._visible = visible_directions(self.scene, self.directions, self.config)
        return self._visible

    def select_cameras(self, i: int) -> List[Camera]:
        cfg = self.config
        cand = self.visible[i]
        if len(cand) == 0:
            raise ZeroVisibilityError(i)
        point = self.scene.positions[i]
        # re-verify at every radius; drop failing directions and re-cluster
        while True:
            K = min(cfg.n_medoids, len(cand))
            med = cand[kmedoids_directions(self.directions[cand], K, seed=cfg.seed + i,
                                           restarts=cfg.kmedoids_restarts)]
            cams = build_cameras(point, self.directions[med], self.scene.sphere, cfg)
            ok = np.array([bool(self.scene.visibility(c, i)[0]) for c in cams])
            bad_dirs = {int(med[j // len(cfg.radii)]) for j in np.flatnonzero(~ok)}
            if not bad_dirs:
                break
            cand = np.array([c for c in cand if int(c) not in bad_dirs])
            if len(cand) == 0:
                raise ZeroVisibilityError(i)
        if K < cfg.n_medoids:
            # too few distinct visible directions: repeat medoids to keep K*M*L views
            reps = [cams[j % len(cams)] for j in range(cfg.n_medoids * len(cfg.radii))]
            cams = reps
        return cams

    def stack(self, i: int) -> ViewStack:
        cams = self.select_cameras(i)
        images, cam_of, rot_of = _stack_images(self.scene, cams, self.config.n_inplane)
        return ViewStack(i, images, cams, cam_of, rot_of)


def render_view_stack(mesh: TriangleMesh, point: PointSample, config: ViewConfig,
                      sphere: Optional[BoundingSphere] = None, point_id: int = 0) -> ViewStack:
    """View stack for a single surface point of ``mesh``."""
    samples = SampleSet(np.asarray(point.position, dtype=np.float64)[None],
                        np.asarray(point.normal, dtype=np.float64)[None],
                        np.array([point.face_id], dtype=np.int64))
    scene = MeshScene(mesh, samples)
    if sphere is not None:
        scene.sphere = sphere
    views = ShapeViews(scene, config)
    try:
        st = views.stack(0)
    except ZeroVisibilityError:
        raise ZeroVisibilityError(point_id) from None
    st.point_id = point_id
    return st


def save_view_stack(stack: ViewStack, directory) -> None:
    """PGM images plus a ``manifest.txt`` with one line per image."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# point_id image eye_x eye_y eye_z target_x target_y target_z up_x up_y up_z "
             "fov_rad resolution rotation"]
    for k, img in enumerate(stack.images):
        name = f"p{stack.point_id:06d}_v{k:02d}.pgm"
        write_pgm(out / name, img)
        cam = stack.cameras[stack.camera_of_image[k]]
        vals = list(cam.eye) + list(cam.target) + list(cam.up)
        lines.append(" ".join([str(stack.point_id), name] + [f"{v:.9g}" for v in vals]
                              + [f"{cam.vertical_fov:.9g}", str(cam.resolution),
                                 str(int(stack.rotation_of_image[k]))]))
    with open(out / "manifest.txt", "a") as fh:
        fh.write("\n".join(lines) + "\n")

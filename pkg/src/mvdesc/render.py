"""Headless software rasterizer: shaded images and per-pixel sample index maps."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .geometry import SampleSet, TriangleMesh


@dataclass(frozen=True)
class ShadingParams:
    ambient: float = 0.1
    diffuse: float = 0.7
    specular: float = 0.2
    shininess: float = 16.0


DEFAULT_SHADING = ShadingParams()


@dataclass
class Camera:
    eye: np.ndarray
    target: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    vertical_fov: float = np.deg2rad(50.0)
    resolution: int = 227
    near: float = 0.01
    far: float = 100.0
    # orthographic cameras ignore vertical_fov and frame +-ortho_half_height
    orthographic: bool = False
    ortho_half_height: float = 1.0

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        fwd = self.target - self.eye
        if np.linalg.norm(fwd) <= 0:
            raise ValueError("camera eye equals target")
        if not 0 < self.near < self.far:
            raise ValueError("camera needs 0 < near < far")
        f = fwd / np.linalg.norm(fwd)
        if np.linalg.norm(np.cross(f, self.up)) < 1e-6 * max(np.linalg.norm(self.up), 1e-300):
            raise ValueError("camera up vector parallel to view direction")

    def basis(self) -> np.ndarray:
        """Rows: right, up, forward (camera looks along +forward)."""
        f = self.target - self.eye
        f = f / np.linalg.norm(f)
        r = np.cross(f, self.up)
        r /= np.linalg.norm(r)
        u = np.cross(r, f)
        return np.stack([r, u, f])

    @property
    def view_direction(self) -> np.ndarray:
        return self.basis()[2]

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self.basis().T

    def project(self, cam_points: np.ndarray) -> np.ndarray:
        """Camera-space points to continuous pixel coords (x right, y down)."""
        res = self.resolution
        x, y, z = cam_points[..., 0], cam_points[..., 1], cam_points[..., 2]
        if self.orthographic:
            nx, ny = x / self.ortho_half_height, y / self.ortho_half_height
        else:
            t = np.tan(self.vertical_fov / 2)
            with np.errstate(divide="ignore", invalid="ignore"):
                nx, ny = x / (z * t), y / (z * t)
        return np.stack([(nx + 1) * 0.5 * res, (1 - ny) * 0.5 * res], axis=-1)

    def pixel_rays(self) -> np.ndarray:
        """Unit camera-space directions toward the viewer for each pixel center."""
        res = self.resolution
        c = (np.arange(res) + 0.5) / res * 2 - 1
        nx = np.broadcast_to(c[None, :], (res, res))
        ny = np.broadcast_to(-c[:, None], (res, res))
        if self.orthographic:
            v = np.zeros((res, res, 3))
            v[..., 2] = -1.0
            return v
        t = np.tan(self.vertical_fov / 2)
        d = np.stack([nx * t, ny * t, np.ones_like(nx)], axis=-1)
        return -d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class ShadedImage:
    pixels: np.ndarray

    @property
    def resolution(self) -> int:
        return self.pixels.shape[0]


@dataclass
class IndexMap:
    depth: np.ndarray          # (res, res) min fragment depth, inf where empty
    face_ids: np.ndarray       # (res, res) frontmost face or -1
    sample_pixel: np.ndarray   # (n,) flat pixel of each sample, -1 if off-image / occluded
    sample_depth: np.ndarray   # (n,) camera depth of each sample

    @property
    def visible(self) -> np.ndarray:
        return self.sample_pixel >= 0

    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(self.sample_pixel >= 0)

    def indices_at(self, row: int, col: int) -> List[int]:
        flat = row * self.depth.shape[1] + col
        return [int(i) for i in np.flatnonzero(self.sample_pixel == flat)]


@dataclass
class Fragments:
    depth: np.ndarray
    face_ids: np.ndarray


# ------------------------------------------------------------------ raster core

def _clip_near(tri: np.ndarray, near: float) -> List[np.ndarray]:
    """Clip one camera-space triangle against z >= near. Returns 0-2 triangles."""
    inside = tri[:, 2] >= near
    if inside.all():
        return [tri]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            poly.append(a)
        if ina != inb:
            s = (near - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    return [np.array([poly[0], poly[j], poly[j + 1]]) for j in range(1, len(poly) - 1)]


def rasterize(mesh: TriangleMesh, cam: Camera, max_fragments: int = 1 << 21) -> Fragments:
    """Depth buffer and frontmost-face buffer of a mesh.

    Pixel-center coverage with the top-left fill rule, perspective-correct
    depth. Depth ties go to the lower face index.
    """
    res = cam.resolution
    depth = np.full(res * res, np.inf)
    face_buf = np.full(res * res, -1, dtype=np.int64)
    if len(mesh.faces) == 0:
        return Fragments(depth.reshape(res, res), face_buf.reshape(res, res))
    tris = cam.to_camera(mesh.triangles)
    x, y, z = tris[..., 0], tris[..., 1], tris[..., 2]
    keep = (z.max(axis=1) >= cam.near) & (z.min(axis=1) <= cam.far)
    if cam.orthographic:
        h = cam.ortho_half_height
        keep &= ~np.all(x > h, axis=1) & ~np.all(x < -h, axis=1)
        keep &= ~np.all(y > h, axis=1) & ~np.all(y < -h, axis=1)
    else:
        t = np.tan(cam.vertical_fov / 2)
        keep &= ~np.all(x > z * t, axis=1) & ~np.all(-x > z * t, axis=1)
        keep &= ~np.all(y > z * t, axis=1) & ~np.all(-y > z * t, axis=1)
    ids = np.flatnonzero(keep)
    front = np.all(tris[ids, :, 2] >= cam.near, axis=1)
    parts = [tris[ids[front]]]
    fids = [ids[front]]
    for fid in ids[~front]:
        for tri in _clip_near(tris[fid], cam.near):
            parts.append(tri[None])
            fids.append(np.array([fid]))
    tris = np.concatenate(parts)
    fids = np.concatenate(fids).astype(np.int64)
    if len(tris) == 0:
        return Fragments(depth.reshape(res, res), face_buf.reshape(res, res))

    scr = cam.project(tris)
    area = ((scr[:, 1, 0] - scr[:, 0, 0]) * (scr[:, 2, 1] - scr[:, 0, 1])
            - (scr[:, 1, 1] - scr[:, 0, 1]) * (scr[:, 2, 0] - scr[:, 0, 0]))
    good = np.isfinite(area) & (area != 0)
    tris, scr, area, fids = tris[good], scr[good], area[good], fids[good]
    neg = area < 0
    tris[neg] = tris[neg][:, [0, 2, 1]]
    scr[neg] = scr[neg][:, [0, 2, 1]]
    area = np.abs(area)

    x0 = np.maximum(np.floor(scr[:, :, 0].min(1) - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.ceil(scr[:, :, 0].max(1) - 0.5), res - 1).astype(np.int64)
    y0 = np.maximum(np.floor(scr[:, :, 1].min(1) - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.ceil(scr[:, :, 1].max(1) - 0.5), res - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    counts = wx * np.maximum(y1 - y0 + 1, 0)

    # edge i is opposite vertex i: (v[i+1] -> v[i+2])
    a = scr[:, [1, 2, 0]]
    b = scr[:, [2, 0, 1]]
    ex = b[..., 0] - a[..., 0]
    ey = b[..., 1] - a[..., 1]
    top_left = ((ey == 0) & (ex > 0)) | (ey < 0)

    csum = np.cumsum(counts)
    bounds = [0]
    while bounds[-1] < len(tris):
        base = csum[bounds[-1] - 1] if bounds[-1] else 0
        nxt = int(np.searchsorted(csum, base + max_fragments, side="right"))
        bounds.append(max(nxt, bounds[-1] + 1))
    for start, stop in zip(bounds[:-1], bounds[1:]):
        sel = np.arange(start, stop)
        total = int(counts[sel].sum())
        if total == 0:
            continue
        c = counts[sel]
        tri = np.repeat(sel, c)
        off = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
        col = x0[tri] + off % wx[tri]
        row = y0[tri] + off // wx[tri]
        px = col + 0.5
        py = row + 0.5
        inside = np.ones(total, dtype=bool)
        w = []
        for i in range(3):
            e = (py - a[tri, i, 1]) * ex[tri, i] - (px - a[tri, i, 0]) * ey[tri, i]
            inside &= np.where(top_left[tri, i], e >= 0, e > 0)
            w.append(e)
        if not inside.any():
            continue
        tri, row, col = tri[inside], row[inside], col[inside]
        w0, w1, w2 = (wi[inside] / area[tri] for wi in w)
        zt = tris[tri, :, 2]
        if cam.orthographic:
            zf = w0 * zt[:, 0] + w1 * zt[:, 1] + w2 * zt[:, 2]
        else:
            zf = 1.0 / (w0 / zt[:, 0] + w1 / zt[:, 1] + w2 / zt[:, 2])
        ok = (zf >= cam.near) & (zf <= cam.far)
        pix = (row * res + col)[ok]
        zf = zf[ok]
        ff = fids[tri[ok]]
        if len(pix) == 0:
            continue
        _resolve(depth, face_buf, pix, zf, ff)
    return Fragments(depth.reshape(res, res), face_buf.reshape(res, res))


# -------------------------------------------------------------------- shading

def _phong(normals_cam, view_vec, light_cam, shading: ShadingParams) -> np.ndarray:
    n = normals_cam
    flip = (n * view_vec).sum(-1) < 0
    n = np.where(flip[..., None], -n, n)
    ndl = (n * light_cam).sum(-1)
    diff = np.maximum(ndl, 0.0)
    r = 2 * ndl[..., None] * n - light_cam
    rdv = np.maximum((r * view_vec).sum(-1), 0.0)
    spec = np.where(ndl > 0, rdv ** shading.shininess, 0.0)
    val = shading.ambient + shading.diffuse * diff + shading.specular * spec
    return np.clip(val, 0.0, 1.0)


def render_shaded(mesh: TriangleMesh, cam: Camera, light_dir: Optional[np.ndarray] = None,
                  shading: ShadingParams = DEFAULT_SHADING) -> ShadedImage:
    """Z-buffered two-sided Phong render.

    ``light_dir`` points from the surface toward the light; default is toward
    the camera (light along the view direction).
    """
    frags = rasterize(mesh, cam)
    return shade_fragments(mesh, cam, frags, light_dir, shading)


def shade_fragments(mesh, cam, frags: Fragments, light_dir=None,
                    shading: ShadingParams = DEFAULT_SHADING) -> ShadedImage:
    res = cam.resolution
    img = np.zeros((res, res))
    covered = frags.face_ids >= 0
    if not covered.any():
        return ShadedImage(img)
    basis = cam.basis()
    if light_dir is None:
        light_dir = -basis[2]
    light_cam = basis @ (np.asarray(light_dir, dtype=np.float64) / np.linalg.norm(light_dir))
    n_cam = mesh.face_normals() @ basis.T
    n = n_cam[frags.face_ids[covered]]
    v = cam.pixel_rays()[covered]
    img[covered] = _phong(n, v, light_cam, shading)
    return ShadedImage(img)


# --------------------------------------------------------------------- index

def depth_epsilon(cam: Camera) -> float:
    return 1e-3 * (cam.far - cam.near)


def _tile_bins(mesh: TriangleMesh, cam: Camera, tile: int):
    """Conservative screen-space binning: (sorted face ids, per-tile start, grid size).

    Each face is registered in every tile its projected bounding box touches;
    faces crossing the near plane go to every tile.
    """
    res = cam.resolution
    G = -(-res // tile)
    tc = cam.to_camera(mesh.triangles.reshape(-1, 3)).reshape(-1, 3, 3)
    zmin, zmax = tc[:, :, 2].min(1), tc[:, :, 2].max(1)
    live = (zmax >= cam.near) & (zmin <= cam.far)
    crossing = live & (zmin < cam.near)
    x0 = np.zeros(len(tc), np.int64)
    y0 = np.zeros(len(tc), np.int64)
    x1 = np.full(len(tc), G - 1, np.int64)
    y1 = np.full(len(tc), G - 1, np.int64)
    front = np.flatnonzero(live & ~crossing)
    if len(front):
        pr = cam.project(tc[front].reshape(-1, 3)).reshape(-1, 3, 2)
        lo = np.floor(pr.min(1) / tile)
        hi = np.floor(pr.max(1) / tile)
        live[front] &= (hi[:, 0] >= 0) & (hi[:, 1] >= 0) & (lo[:, 0] < G) & (lo[:, 1] < G)
        x0[front] = np.clip(lo[:, 0], 0, G - 1)
        y0[front] = np.clip(lo[:, 1], 0, G - 1)
        x1[front] = np.clip(hi[:, 0], 0, G - 1)
        y1[front] = np.clip(hi[:, 1], 0, G - 1)
    faces = np.flatnonzero(live)
    wx = x1[faces] - x0[faces] + 1
    counts = wx * (y1[faces] - y0[faces] + 1)
    off = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    wr = np.repeat(wx, counts)
    tiles = (np.repeat(y0[faces], counts) + off // wr) * G + np.repeat(x0[faces], counts) + off % wr
    order = np.argsort(tiles, kind="stable")
    starts = np.searchsorted(tiles[order], np.arange(G * G + 1))
    return np.repeat(faces, counts)[order], starts, G


def _segment_hits(origins, seg, tris, t_max, rel_tol=1e-6) -> np.ndarray:
    """Per row: does ``origins + t * seg`` with rel_tol < t < t_max cross ``tris``?"""
    v0 = tris[:, 0]
    e1, e2 = tris[:, 1] - v0, tris[:, 2] - v0
    pv = np.cross(seg, e2)
    det = (e1 * pv).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        sv = origins - v0
        u = (sv * pv).sum(-1) * inv
        qv = np.cross(sv, e1)
        v = (seg * qv).sum(-1) * inv
        t = (e2 * qv).sum(-1) * inv
        return (det != 0) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > rel_tol) & (t < t_max)


def render_index(mesh: TriangleMesh, samples, cam: Camera,
                 frags: Optional[Fragments] = None, tile: int = 4,
                 max_pairs: int = 1 << 20) -> IndexMap:
    """Depth/face buffers plus per-sample visibility (see ``sample_visibility``)."""
    if frags is None:
        frags = rasterize(mesh, cam)
    pixel, z = sample_visibility(mesh, samples, cam, tile, max_pairs)
    return IndexMap(frags.depth, frags.face_ids, pixel, z)


def sample_visibility(mesh: TriangleMesh, samples, cam: Camera, tile: int = 4,
                      max_pairs: int = 1 << 20) -> Tuple[np.ndarray, np.ndarray]:
    """(flat pixel or -1, camera depth) of surface samples seen on their own rays.

    A sample inside the frustum is visible when the segment from it towards
    the camera (up to the near plane) crosses no other face. Candidate faces
    come from a conservative screen-tile binning, so the test is exact even
    for occluders too thin to own a pixel center (silhouettes, grazing faces).
    """
    if isinstance(samples, SampleSet):
        positions, face_ids = samples.positions, samples.face_ids
    else:
        positions = np.asarray([s.position for s in samples], dtype=np.float64).reshape(-1, 3)
        face_ids = np.asarray([s.face_id for s in samples], dtype=np.int64)
    res = cam.resolution
    pc = cam.to_camera(positions)
    z = pc[:, 2]
    scr = cam.project(pc)
    with np.errstate(invalid="ignore"):
        col = np.floor(scr[:, 0])
        row = np.floor(scr[:, 1])
        ok = (z >= cam.near) & (z <= cam.far) & (col >= 0) & (col < res) & (row >= 0) & (row < res)
    col = np.where(ok, col, 0).astype(np.int64)
    row = np.where(ok, row, 0).astype(np.int64)
    vis = ok.copy()
    idx = np.flatnonzero(ok)
    if len(idx):
        binned, starts, G = _tile_bins(mesh, cam, tile)
        t_of = (row[idx] // tile) * G + col[idx] // tile
        n_cand = starts[t_of + 1] - starts[t_of]
        if cam.orthographic:
            seg_all = -cam.view_direction[None] * (z[idx] - cam.near)[:, None]
            tmax_all = np.ones(len(idx))
        else:
            seg_all = cam.eye[None] - positions[idx]
            tmax_all = 1.0 - cam.near / z[idx]
        tris = mesh.triangles
        lo = 0
        while lo < len(idx):
            hi = lo + max(1, int(np.searchsorted(np.cumsum(n_cand[lo:]), max_pairs, side="right")))
            k = n_cand[lo:hi]
            rows = np.repeat(np.arange(lo, hi), k)
            off = np.arange(k.sum()) - np.repeat(np.cumsum(k) - k, k)
            face = binned[starts[t_of[rows]] + off]
            own = face == face_ids[idx[rows]]
            rows, face = rows[~own], face[~own]
            hit = _segment_hits(positions[idx[rows]], seg_all[rows], tris[face], tmax_all[rows])
            blocked = np.zeros(hi - lo, bool)
            blocked[rows[hit] - lo] = True
            vis[idx[lo:hi]] = ~blocked
            lo = hi
    return np.where(vis, row * res + col, -1), z


# ---------------------------------------------------------------- point clouds

def splat(points: np.ndarray, cam: Camera, ball_radius: float,
          max_fragments: int = 1 << 21) -> Fragments:
    """Depth buffer of sphere impostors; ``face_ids`` holds the point index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    res = cam.resolution
    depth = np.full(res * res, np.inf)
    owner = np.full(res * res, -1, dtype=np.int64)
    pc = cam.to_camera(pts)
    z = pc[:, 2]
    ok = (z >= cam.near) & (z - ball_radius <= cam.far)
    ids = np.flatnonzero(ok)
    if len(ids) == 0:
        return Fragments(depth.reshape(res, res), owner.reshape(res, res))
    scr = cam.project(pc[ids])
    if cam.orthographic:
        scale = np.full(len(ids), res / (2 * cam.ortho_half_height))
    else:
        scale = res / (2 * z[ids] * np.tan(cam.vertical_fov / 2))
    rad = ball_radius * scale
    x0 = np.maximum(np.floor(scr[:, 0] - rad - 0.5), 0)
    x1 = np.minimum(np.ceil(scr[:, 0] + rad - 0.5), res - 1)
    y0 = np.maximum(np.floor(scr[:, 1] - rad - 0.5), 0)
    y1 = np.minimum(np.ceil(scr[:, 1] + rad - 0.5), res - 1)
    live = (x0 <= x1) & (y0 <= y1)
    ids, scr, scale = ids[live], scr[live], scale[live]
    x0, x1, y0, y1 = (v[live].astype(np.int64) for v in (x0, x1, y0, y1))
    wx = x1 - x0 + 1
    counts = wx * (y1 - y0 + 1)
    csum = np.cumsum(counts)
    start = 0
    while start < len(ids):
        base = csum[start - 1] if start else 0
        stop = max(int(np.searchsorted(csum, base + max_fragments, side="right")), start + 1)
        sel = np.arange(start, stop)
        start = stop
        c = counts[sel]
        total = int(c.sum())
        k = np.repeat(sel, c)
        off = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
        col = x0[k] + off % wx[k]
        row = y0[k] + off // wx[k]
        dx = (col + 0.5 - scr[k, 0]) / scale[k]
        dy = (row + 0.5 - scr[k, 1]) / scale[k]
        rho2 = dx * dx + dy * dy
        inside = rho2 <= ball_radius ** 2
        zf = z[ids[k]] - np.sqrt(np.maximum(ball_radius ** 2 - rho2, 0.0))
        inside &= (zf <= cam.far)
        _resolve(depth, owner, (row * res + col)[inside], zf[inside], ids[k][inside])
    return Fragments(depth.reshape(res, res), owner.reshape(res, res))


def _resolve(depth, owner, pix, zf, key) -> None:
    if len(pix) == 0:
        return
    srt = np.lexsort((key, zf, pix))
    pix, zf, key = pix[srt], zf[srt], key[srt]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, zf, key = pix[first], zf[first], key[first]
    cur = depth[pix]
    better = (zf < cur) | ((zf == cur) & (key < owner[pix]))
    depth[pix[better]] = zf[better]
    owner[pix[better]] = key[better]


def render_point_cloud(points: np.ndarray, cam: Camera, ball_radius: float,
                       normals: Optional[np.ndarray] = None, light_dir=None,
                       shading: ShadingParams = DEFAULT_SHADING,
                       frags: Optional[Fragments] = None) -> ShadedImage:
    """Render each point as a small ball, shaded with the point normal if given
    and otherwise as facing the camera."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    if frags is None:
        frags = splat(pts, cam, ball_radius)
    res = cam.resolution
    img = np.zeros((res, res))
    covered = frags.face_ids >= 0
    if not covered.any():
        return ShadedImage(img)
    basis = cam.basis()
    if light_dir is None:
        light_dir = -basis[2]
    light_cam = basis @ (np.asarray(light_dir, dtype=np.float64) / np.linalg.norm(light_dir))
    v = cam.pixel_rays()[covered]
    if normals is None:
        n = v
    else:
        n = (np.asarray(normals, dtype=np.float64) @ basis.T)[frags.face_ids[covered]]
    img[covered] = _phong(n, v, light_cam, shading)
    return ShadedImage(img)


def point_cloud_visibility(points: np.ndarray, cam: Camera, ball_radius: float,
                           frags: Optional[Fragments] = None) -> np.ndarray:
    """Points whose own ball is frontmost (within one radius) at their center pixel."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if frags is None:
        frags = splat(pts, cam, ball_radius)
    res = cam.resolution
    pc = cam.to_camera(pts)
    z = pc[:, 2]
    scr = cam.project(pc)
    with np.errstate(invalid="ignore"):
        col, row = np.floor(scr[:, 0]), np.floor(scr[:, 1])
        ok = (z >= cam.near) & (z <= cam.far) & (col >= 0) & (col < res) & (row >= 0) & (row < res)
    col = np.where(ok, col, 0).astype(np.int64)
    row = np.where(ok, row, 0).astype(np.int64)
    front = frags.depth[row, col]
    return ok & (z - ball_radius <= front + ball_radius + depth_epsilon(cam))


# ----------------------------------------------------------------- image ops

def in_plane_rotate(img, quarter_turns: int):
    """Clockwise rotation by 90 degrees per quarter turn: (r, c) -> (c, H-1-r)."""
    pixels = img.pixels if isinstance(img, ShadedImage) else img
    if pixels.shape[0] != pixels.shape[1]:
        raise ValueError("in_plane_rotate needs a square image")
    out = np.rot90(pixels, -(quarter_turns % 4)).copy()
    return ShadedImage(out) if isinstance(img, ShadedImage) else out


def write_pgm(path, img) -> None:
    pixels = img.pixels if isinstance(img, ShadedImage) else np.asarray(img)
    data = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval

"""Part-guided non-rigid registration of consistently labeled point sets.

Each same-label part pair is first aligned by an oriented-bounding-box affine
map, then deformed by per-point offsets that trade closest-point distance
against offset smoothness over a k-NN graph. Both parts deform toward each
other; the final closest compatible points give dense correspondences.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .geometry import NeighborGraph, OrientedBoundingBox, TriangleMesh, area_weighted_sample, closest_points, compute_obb, knn_graph

BINARY_MAGIC = b"MVCORR01"


class NoSharedLabelsError(ValueError):
    pass


@dataclass
class LabeledPointSet:
    points: np.ndarray
    labels: np.ndarray
    shape_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, n: int = 10_000, seed: int = 0,
                  shape_id: str = "") -> "LabeledPointSet":
        if mesh.face_labels is None:
            raise ValueError(f"mesh {shape_id!r} has no face labels")
        s = area_weighted_sample(mesh, n, seed)
        return cls(s.positions, s.labels, shape_id)


@dataclass
class AffineTransform:
    linear: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.linear.T + self.translation


@dataclass
class EnergyReport:
    total: float
    data_ab: float
    data_ba: float
    smooth_a: float
    smooth_b: float
    iteration: int


@dataclass
class CorrespondenceSet:
    shape_a: List[str] = field(default_factory=list)
    idx_a: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shape_b: List[str] = field(default_factory=list)
    idx_b: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.idx_a)

    @classmethod
    def from_pairs(cls, shape_a: str, shape_b: str, pairs: np.ndarray) -> "CorrespondenceSet":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls([shape_a] * len(pairs), pairs[:, 0].copy(), [shape_b] * len(pairs), pairs[:, 1].copy())

    @classmethod
    def concat(cls, sets: Sequence["CorrespondenceSet"]) -> "CorrespondenceSet":
        out = cls()
        for s in sets:
            out.shape_a += list(s.shape_a)
            out.shape_b += list(s.shape_b)
        out.idx_a = np.concatenate([s.idx_a for s in sets]) if sets else out.idx_a
        out.idx_b = np.concatenate([s.idx_b for s in sets]) if sets else out.idx_b
        return out

    def shape_pairs(self) -> List[Tuple[str, str]]:
        return sorted(set(zip(self.shape_a, self.shape_b)))


@dataclass
class RegistrationResult:
    offsets_a: np.ndarray
    offsets_b: np.ndarray
    pairs: np.ndarray          # (n, 2) local (a, b) index pairs
    reports: List[EnergyReport]
    converged: bool


# ----------------------------------------------------------------- affine init

def _aabb(points: np.ndarray) -> OrientedBoundingBox:
    lo, hi = points.min(axis=0), points.max(axis=0)
    return OrientedBoundingBox(0.5 * (lo + hi), np.eye(3), 0.5 * (hi - lo))


def affine_init(part_a: np.ndarray, part_b: np.ndarray) -> AffineTransform:
    """Map part A's oriented bounding box onto part B's.

    Axes pair up by descending extent. PCA signs are unstable for
    near-axis-aligned boxes and PCA axes are arbitrary for near-cubic parts,
    so candidates are the eight sign assignments of the PCA box map plus the
    axis-aligned box map. Among candidates whose symmetric closest-point cost
    is within 1.5x of the best, the one with the least rotation (largest trace)
    wins.
    """
    part_a = np.asarray(part_a, dtype=np.float64).reshape(-1, 3)
    part_b = np.asarray(part_b, dtype=np.float64).reshape(-1, 3)
    frames = [(compute_obb(part_a), compute_obb(part_b), list(itertools.product((1.0, -1.0), repeat=3))),
              (_aabb(part_a), _aabb(part_b), [(1.0, 1.0, 1.0)])]
    candidates = []
    for box_a, box_b, sign_sets in frames:
        ea = box_a.half_extents
        safe = np.where(ea < 1e-8, 1.0, ea)
        scale = np.where(ea < 1e-8, 1.0, box_b.half_extents / safe)
        for signs in sign_sets:
            rot = box_b.axes.T @ np.diag(signs) @ box_a.axes
            linear = box_b.axes.T @ np.diag(scale * np.array(signs)) @ box_a.axes
            t = AffineTransform(linear, box_b.center - linear @ box_a.center)
            moved = t.apply(part_a)
            cost = closest_points(moved, part_b)[1].mean() + closest_points(part_b, moved)[1].mean()
            candidates.append((cost, -float(np.trace(rot)), len(candidates), t))
    lowest = min(c[0] for c in candidates)
    near = [c for c in candidates if c[0] <= 1.5 * lowest + 1e-15]
    return min(near, key=lambda c: (c[1], c[0], c[2]))[3]


# --------------------------------------------------------------- offset solve

def graph_laplacian(graph: Optional[NeighborGraph], n: int) -> sp.csr_matrix:
    """Laplacian L with sum over directed edges |o_i - o_j|^2 = o^T L o."""
    if graph is None or n < 2:
        return sp.csr_matrix((n, n))
    i, j = graph.edges()
    w = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(n, n)).tocsr()
    s = w + w.T
    return (sp.diags(np.asarray(s.sum(axis=1)).ravel()) - s).tocsr()


def smoothness(offsets: np.ndarray, graph: Optional[NeighborGraph]) -> float:
    if graph is None:
        return 0.0
    i, j = graph.edges()
    return float(((offsets[i] - offsets[j]) ** 2).sum())


def _solve_field(points, targets, lap, weight, x0, rtol) -> np.ndarray:
    n = len(points)
    system = (sp.identity(n, format="csr") + weight * lap).tocsr()
    rhs = targets - points
    out = np.empty_like(rhs)
    for c in range(3):
        guess = None if x0 is None else x0[:, c]
        sol, info = cg(system, rhs[:, c], x0=guess, rtol=rtol, atol=0.0, maxiter=10 * n + 100)
        if info < 0:
            raise np.linalg.LinAlgError("conjugate gradient breakdown")
        out[:, c] = sol
    return out


def solve_offsets(part_a: np.ndarray, part_b: np.ndarray, match_ab: np.ndarray, match_ba: np.ndarray,
                  graph_a: Optional[NeighborGraph], graph_b: Optional[NeighborGraph],
                  smooth_weight: float = 1.0, x0_a=None, x0_b=None, rtol: float = 1e-8,
                  iteration: int = 0):
    """Offsets minimizing the deformation energy with matches held fixed.

    ``match_ab[i]`` is the index in B matched to A's point i (and vice versa).
    The two fields decouple; each is one SPD system (I + w L) o = m - p per axis.
    """
    part_a = np.asarray(part_a, dtype=np.float64)
    part_b = np.asarray(part_b, dtype=np.float64)
    lap_a = graph_laplacian(graph_a, len(part_a))
    lap_b = graph_laplacian(graph_b, len(part_b))
    oa = _solve_field(part_a, part_b[match_ab], lap_a, smooth_weight, x0_a, rtol)
    ob = _solve_field(part_b, part_a[match_ba], lap_b, smooth_weight, x0_b, rtol)
    report = energy_report(part_a, part_b, oa, ob, match_ab, match_ba, graph_a, graph_b,
                           smooth_weight, iteration)
    return oa, ob, report


def energy_report(part_a, part_b, oa, ob, match_ab, match_ba, graph_a, graph_b,
                  smooth_weight: float = 1.0, iteration: int = 0) -> EnergyReport:
    dab = float(((part_a + oa - part_b[match_ab]) ** 2).sum())
    dba = float(((part_b + ob - part_a[match_ba]) ** 2).sum())
    sa = smooth_weight * smoothness(oa, graph_a)
    sb = smooth_weight * smoothness(ob, graph_b)
    return EnergyReport(dab + dba + sa + sb, dab, dba, sa, sb, iteration)


# ------------------------------------------------------------------------ ICP

def _graph(points: np.ndarray, k: int) -> Optional[NeighborGraph]:
    if len(points) < 2:
        return None
    return knn_graph(points, min(k, len(points) - 1))


def default_smooth_weight(n_a: int, n_b: int) -> float:
    """0.1 * sqrt(mean part size); keeps stiffness roughly constant across densities."""
    return 0.1 * float(np.sqrt(0.5 * (n_a + n_b)))


def icp_register(part_a: np.ndarray, part_b: np.ndarray, max_iters: int = 30,
                 tol: Optional[float] = None, smooth_weight: Optional[float] = None, k: int = 6,
                 normalize: bool = True) -> RegistrationResult:
    """Alternate offset solves and closest-point updates.

    ``part_a`` is expected to be affine-initialized already. Energies are
    reported in the normalized frame (B scaled into the unit cube). ``tol``
    defaults to 1e-5 of the initial energy; ``smooth_weight`` defaults to
    ``default_smooth_weight``.
    """
    a = np.asarray(part_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(part_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty part")
    shift, scale = np.zeros(3), 1.0
    if normalize:
        lo, hi = b.min(axis=0), b.max(axis=0)
        ext = float((hi - lo).max())
        shift, scale = lo, (1.0 / ext if ext > 0 else 1.0)
    a_n = (a - shift) * scale
    b_n = (b - shift) * scale
    graph_a, graph_b = _graph(a_n, k), _graph(b_n, k)
    if smooth_weight is None:
        smooth_weight = default_smooth_weight(len(a_n), len(b_n))

    oa = np.zeros_like(a_n)
    ob = np.zeros_like(b_n)
    mab, _ = closest_points(a_n, b_n)
    mba, _ = closest_points(b_n, a_n)
    reports = [energy_report(a_n, b_n, oa, ob, mab, mba, graph_a, graph_b, smooth_weight, 0)]
    if tol is None:
        tol = 1e-5 * reports[0].total
    converged = False
    for it in range(1, max_iters + 1):
        oa, ob, _ = solve_offsets(a_n, b_n, mab, mba, graph_a, graph_b, smooth_weight,
                                  x0_a=oa, x0_b=ob, iteration=it)
        mab, _ = closest_points(a_n + oa, b_n)
        mba, _ = closest_points(b_n + ob, a_n)
        reports.append(energy_report(a_n, b_n, oa, ob, mab, mba, graph_a, graph_b,
                                     smooth_weight, it))
        if reports[-2].total - reports[-1].total <= tol:
            converged = True
            break
    pairs = np.concatenate([np.stack([np.arange(len(a_n)), mab], axis=1),
                            np.stack([mba, np.arange(len(b_n))], axis=1)])
    pairs = np.unique(pairs, axis=0)
    return RegistrationResult(oa / scale, ob / scale, pairs, reports, converged)


def generate_pair_correspondences(shape_a: LabeledPointSet, shape_b: LabeledPointSet,
                                  max_iters: int = 30, smooth_weight: Optional[float] = None,
                                  k: int = 6) -> CorrespondenceSet:
    shared = sorted(set(shape_a.labels.tolist()) & set(shape_b.labels.tolist()))
    if not shared:
        raise NoSharedLabelsError(
            f"shapes {shape_a.shape_id!r} and {shape_b.shape_id!r} share no part labels")
    chunks = []
    for label in shared:
        ia = np.flatnonzero(shape_a.labels == label)
        ib = np.flatnonzero(shape_b.labels == label)
        pa, pb = shape_a.points[ia], shape_b.points[ib]
        t = affine_init(pa, pb)
        res = icp_register(t.apply(pa), pb, max_iters=max_iters,
                           smooth_weight=smooth_weight, k=k)
        chunks.append(np.stack([ia[res.pairs[:, 0]], ib[res.pairs[:, 1]]], axis=1))
    pairs = np.concatenate(chunks)
    return CorrespondenceSet.from_pairs(shape_a.shape_id, shape_b.shape_id, pairs)


# ------------------------------------------------------------------------- io

def write_correspondences(path, corr: CorrespondenceSet) -> None:
    with open(path, "w") as fh:
        for sa, ia, sb, ib in zip(corr.shape_a, corr.idx_a, corr.shape_b, corr.idx_b):
            fh.write(f"{sa} {int(ia)} {sb} {int(ib)}\n")


def read_correspondences(path) -> CorrespondenceSet:
    sa, ia, sb, ib = [], [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'shapeA idxA shapeB idxB'")
        sa.append(parts[0])
        sb.append(parts[2])
        ia.append(int(parts[1]))
        ib.append(int(parts[3]))
    return CorrespondenceSet(sa, np.array(ia, dtype=np.int64), sb, np.array(ib, dtype=np.int64))


def write_correspondences_binary(path, corr: CorrespondenceSet) -> None:
    """Magic, shape-id table, then little-endian uint32 records (a, ia, b, ib)."""
    names = sorted(set(corr.shape_a) | set(corr.shape_b))
    lookup = {n: i for i, n in enumerate(names)}
    table = "\n".join(names).encode("utf-8")
    rec = np.empty((len(corr), 4), dtype="<u4")
    rec[:, 0] = [lookup[s] for s in corr.shape_a]
    rec[:, 1] = corr.idx_a
    rec[:, 2] = [lookup[s] for s in corr.shape_b]
    rec[:, 3] = corr.idx_b
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<I", len(table)))
        fh.write(table)
        fh.write(struct.pack("<I", len(corr)))
        fh.write(rec.tobytes())


def read_correspondences_binary(path) -> CorrespondenceSet:
    raw = Path(path).read_bytes()
    if raw[:8] != BINARY_MAGIC:
        raise ValueError(f"{path}: bad magic")
    (tlen,) = struct.unpack_from("<I", raw, 8)
    names = raw[12:12 + tlen].decode("utf-8").split("\n") if tlen else []
    (count,) = struct.unpack_from("<I", raw, 12 + tlen)
    rec = np.frombuffer(raw, dtype="<u4", count=4 * count, offset=16 + tlen).reshape(-1, 4)
    return CorrespondenceSet([names[i] for i in rec[:, 0]], rec[:, 1].astype(np.int64),
                             [names[i] for i in rec[:, 2]], rec[:, 3].astype(np.int64))

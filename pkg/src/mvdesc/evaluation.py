"""Correspondence benchmarks: CMC and Euclidean-threshold accuracy, plus
nearest-descriptor matching for dense color transfer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import bounding_sphere


@dataclass
class FeaturePointSet:
    """Per-shape feature positions keyed by feature id, plus an optional symmetry involution."""
    points: Dict[str, Dict[int, np.ndarray]]
    symmetry: Optional[Dict[int, int]] = None

    def __post_init__(self):
        if self.symmetry is not None:
            for a, b in self.symmetry.items():
                if self.symmetry.get(b) != a:
                    raise ValueError(f"symmetry map is not an involution at feature {a}")

    def partner(self, fid: int) -> int:
        if self.symmetry is None:
            return fid
        return self.symmetry.get(fid, fid)


@dataclass
class ShapeEmbedding:
    """Descriptors of one shape: feature points first, then optional dense samples."""
    shape_id: str
    feature_ids: List[int]
    feature_desc: np.ndarray
    feature_pos: np.ndarray
    sample_desc: Optional[np.ndarray] = None
    sample_pos: Optional[np.ndarray] = None
    radius: Optional[float] = None

    def __post_init__(self):
        self.feature_ids = [int(f) for f in self.feature_ids]
        self.feature_desc = np.asarray(self.feature_desc, dtype=np.float64).reshape(len(self.feature_ids), -1)
        self.feature_pos = np.asarray(self.feature_pos, dtype=np.float64).reshape(-1, 3)
        if self.sample_desc is not None:
            self.sample_desc = np.asarray(self.sample_desc, dtype=np.float64)
            self.sample_pos = np.asarray(self.sample_pos, dtype=np.float64).reshape(-1, 3)
        if self.radius is None:
            pts = self.feature_pos if self.sample_pos is None else np.vstack([self.feature_pos, self.sample_pos])
            self.radius = bounding_sphere(pts).radius if len(pts) > 1 else 1.0

    def candidates(self, dense: bool):
        if dense and self.sample_desc is not None and len(self.sample_desc):
            return (np.vstack([self.feature_desc, self.sample_desc]),
                    np.vstack([self.feature_pos, self.sample_pos]))
        return self.feature_desc, self.feature_pos


@dataclass
class EvalCurve:
    x: np.ndarray
    y: np.ndarray
    metric: str
    symmetric: bool
    meta: Dict[str, str] = field(default_factory=dict)


def _queries(embeddings: Sequence[ShapeEmbedding], features: FeaturePointSet, allow_symmetry: bool,
             dense: bool):
    """Yield (query descriptor, candidate descs, candidate positions, gt candidate indices,
    gt positions, target radius) for every ordered shape pair and shared feature."""
    if len(embeddings) < 2:
        raise ValueError("need at least two shapes")
    for src in embeddings:
        for tgt in embeddings:
            if src is tgt:
                continue
            desc, pos = tgt.candidates(dense)
            where = {f: i for i, f in enumerate(tgt.feature_ids)}
            for k, fid in enumerate(src.feature_ids):
                if fid not in where:
                    continue
                gts = [where[fid]]
                if allow_symmetry:
                    p = features.partner(fid)
                    if p != fid and p in where:
                        gts.append(where[p])
                yield src.feature_desc[k], desc, pos, gts, tgt.radius


def _sqdist(q: np.ndarray, cands: np.ndarray) -> np.ndarray:
    return ((cands - q) ** 2).sum(axis=1)


def cmc_curve(embeddings: Sequence[ShapeEmbedding], features: FeaturePointSet,
              allow_symmetry: bool = False, max_rank: Optional[int] = None,
              dense: bool = True) -> EvalCurve:
    """Fraction of queries whose true match ranks <= r, for r = 1..max_rank.

    Equal distances share the best rank among them.
    """
    if allow_symmetry and features.symmetry is None:
        raise ValueError("symmetric evaluation needs a symmetry map")
    ranks = []
    n_cand = 0
    for q, desc, _, gts, _ in _queries(embeddings, features, allow_symmetry, dense):
        d = _sqdist(q, desc)
        ranks.append(min(1 + int((d < d[g]).sum()) for g in gts))
        n_cand = max(n_cand, len(desc))
    if not ranks:
        raise ValueError("no shared feature points between shapes")
    max_rank = max_rank or n_cand
    x = np.arange(1, max_rank + 1)
    r = np.array(ranks)
    y = np.array([(r <= k).mean() for k in x])
    return EvalCurve(x, y, "cmc", allow_symmetry,
                     {"queries": str(len(ranks)), "candidates": "dense" if dense else "features"})


def correspondence_accuracy(embeddings: Sequence[ShapeEmbedding], features: FeaturePointSet,
                            allow_symmetry: bool, thresholds: Sequence[float],
                            dense: bool = True) -> EvalCurve:
    """Fraction of nearest-descriptor predictions within each Euclidean error
    threshold, errors measured after scaling the target to unit bounding-sphere radius."""
    thresholds = np.asarray(list(thresholds), dtype=np.float64)
    if thresholds.size == 0:
        raise ValueError("empty threshold list")
    if allow_symmetry and features.symmetry is None:
        raise ValueError("symmetric evaluation needs a symmetry map")
    errors = []
    for q, desc, pos, gts, radius in _queries(embeddings, features, allow_symmetry, dense):
        j = int(np.argmin(_sqdist(q, desc)))
        errors.append(min(float(np.linalg.norm(pos[j] - pos[g])) for g in gts) / radius)
    if not errors:
        raise ValueError("no shared feature points between shapes")
    e = np.array(errors)
    y = np.array([(e <= t).mean() for t in thresholds])
    return EvalCurve(thresholds, y, "accuracy", allow_symmetry,
                     {"queries": str(len(errors)), "normalization": "unit_bounding_sphere",
                      "candidates": "dense" if dense else "features"})


def nearest_match(source: np.ndarray, target: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Index of the nearest target descriptor for every source descriptor (lowest index on ties)."""
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty descriptor set")
    if source.shape[1] != target.shape[1]:
        raise ValueError(f"dimension mismatch: {source.shape[1]} vs {target.shape[1]}")
    out = np.empty(len(source), dtype=np.int64)
    for s in range(0, len(source), chunk):
        d = ((source[s:s + chunk, None, :] - target[None]) ** 2).sum(axis=2)
        out[s:s + chunk] = d.argmin(axis=1)
    return out


def position_colors(points: np.ndarray) -> np.ndarray:
    """RGB in [0,1] from position within the bounding box."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return np.clip((points - lo) / span, 0.0, 1.0)


def dense_match_colors(points_a: np.ndarray, desc_a: np.ndarray, points_b: np.ndarray,
                       desc_b: np.ndarray):
    """Color A by position; each B point takes the color of its nearest-descriptor A point."""
    colors_a = position_colors(points_a)
    colors_b = colors_a[nearest_match(desc_b, desc_a)]
    return colors_a, colors_b


# -------------------------------------------------------------------------- io

def load_features(path) -> Dict[str, Dict[int, np.ndarray]]:
    out: Dict[str, Dict[int, np.ndarray]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 'shape_id feature_id x y z'")
            out.setdefault(parts[0], {})[int(parts[1])] = np.array([float(v) for v in parts[2:]])
    return out


def save_features(path, points: Dict[str, Dict[int, np.ndarray]]) -> None:
    with open(path, "w") as fh:
        for sid in sorted(points):
            for fid in sorted(points[sid]):
                x, y, z = (float(v) for v in points[sid][fid])
                fh.write(f"{sid} {int(fid)} {x!r} {y!r} {z!r}\n")


def load_symmetry(path) -> Dict[int, int]:
    sym = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'feature_id symmetric_feature_id'")
            a, b = int(parts[0]), int(parts[1])
            sym[a] = b
            sym.setdefault(b, a)
    return sym


def save_symmetry(path, sym: Dict[int, int]) -> None:
    with open(path, "w") as fh:
        for a in sorted(sym):
            fh.write(f"{a} {sym[a]}\n")


def write_curve(path, curve: EvalCurve) -> None:
    meta = dict(metric=curve.metric, symmetric=str(int(curve.symmetric)), **curve.meta)
    with open(path, "w") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n")
        fh.write("x,y\n")
        for x, y in zip(curve.x, curve.y):
            x = int(x) if curve.metric == "cmc" else float(x)
            fh.write(f"{x!r},{float(y)!r}\n")


def read_curve(path) -> EvalCurve:
    meta = {}
    xs, ys = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                meta.update(kv.split("=", 1) for kv in line[1:].split())
            elif line and line != "x,y":
                x, y = line.split(",")
                xs.append(float(x))
                ys.append(float(y))
    metric = meta.pop("metric", "")
    sym = meta.pop("symmetric", "0") == "1"
    return EvalCurve(np.array(xs), np.array(ys), metric, sym, meta)

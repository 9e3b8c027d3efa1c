"""Synthetic two-class dataset of box assemblies with part labels and feature points.

Class ``winged``: fuselage, two wings, tail fin. Class ``legged``: seat, four
legs, backrest. Boxes only touch (never interpenetrate) and contact faces are
left out, so every remaining face is on the outer surface.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PointSample, TriangleMesh

# box sides in emission order; each side becomes two triangles
SIDES = ("-x", "+x", "-y", "+y", "-z", "+z")

WINGED, LEGGED = "winged", "legged"
LABELS = {WINGED: {"body": 0, "wing": 1, "fin": 2}, LEGGED: {"seat": 3, "leg": 4, "back": 5}}
FEATURES = {
    WINGED: {0: "nose", 1: "fin top", 2: "left wingtip", 3: "right wingtip",
             4: "left wing root", 5: "right wing root", 6: "tail"},
    LEGGED: {10: "front left foot", 11: "front right foot", 12: "back left foot",
             13: "back right foot", 14: "backrest top", 15: "seat front"},
}
SYMMETRY = {0: 0, 1: 1, 2: 3, 3: 2, 4: 5, 5: 4, 6: 6,
            10: 11, 11: 10, 12: 13, 13: 12, 14: 14, 15: 15}


@dataclass
class ToyShape:
    shape_id: str
    category: str
    mesh: TriangleMesh
    features: Dict[int, PointSample]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def rotated(self, rotation: np.ndarray, shape_id: Optional[str] = None) -> "ToyShape":
        rotation = np.asarray(rotation, dtype=np.float64)
        feats = {k: PointSample(rotation @ p.position, rotation @ p.normal, p.face_id, p.label)
                 for k, p in self.features.items()}
        return ToyShape(shape_id or self.shape_id, self.category, self.mesh.transformed(rotation),
                        feats, rotation @ self.rotation)


class _Builder:
    def __init__(self):
        self.vertices: List[np.ndarray] = []
        self.faces: List[Tuple[int, int, int]] = []
        self.labels: List[int] = []
        self.side_faces: Dict[Tuple[str, str], Tuple[int, int]] = {}
        self.boxes: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def box(self, name: str, lo, hi, label: int, skip: Tuple[str, ...] = ()) -> None:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        self.boxes[name] = (lo, hi)
        for side in SIDES:
            if side in skip:
                continue
            axis = "xyz".index(side[1])
            sign = 1.0 if side[0] == "+" else -1.0
            u, v = [a for a in range(3) if a != axis]
            if sign < 0:
                u, v = v, u  # keep outward winding
            corners = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                p = np.empty(3)
                p[axis] = hi[axis] if sign > 0 else lo[axis]
                p[u] = (lo[u], hi[u])[du]
                p[v] = (lo[v], hi[v])[dv]
                corners.append(p)
            base = len(self.vertices)
            self.vertices.extend(corners)
            first = len(self.faces)
            self.faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
            self.labels += [label, label]
            self.side_faces[(name, side)] = (first, first + 1)

    def point(self, name: str, side: str, s: float = 0.5, t: float = 0.5) -> PointSample:
        """Point on a box side; (s, t) are fractions along the side's two axes."""
        lo, hi = self.boxes[name]
        axis = "xyz".index(side[1])
        u, v = [a for a in range(3) if a != axis]
        p = np.empty(3)
        p[axis] = hi[axis] if side[0] == "+" else lo[axis]
        p[u] = lo[u] + s * (hi[u] - lo[u])
        p[v] = lo[v] + t * (hi[v] - lo[v])
        n = np.zeros(3)
        n[axis] = 1.0 if side[0] == "+" else -1.0
        f0, f1 = self.side_faces[(name, side)]
        face = f0 if _inside(np.array(self.vertices)[list(self.faces[f0])], p) else f1
        return PointSample(p, n, face, self.labels[face])

    def mesh(self) -> TriangleMesh:
        return TriangleMesh(np.array(self.vertices), np.array(self.faces, dtype=np.int64),
                            np.array(self.labels, dtype=np.int64))


def _inside(tri: np.ndarray, p: np.ndarray) -> bool:
    a, b, c = tri
    n = np.cross(b - a, c - a)
    return all(np.dot(np.cross(q1 - q0, p - q0), n) >= -1e-12
               for q0, q1 in ((a, b), (b, c), (c, a)))


def winged_shape(rng: np.random.Generator, shape_id: str = "w") -> ToyShape:
    lab = LABELS[WINGED]
    length = rng.uniform(1.6, 2.2)
    half_w = rng.uniform(0.12, 0.18)
    half_h = rng.uniform(0.12, 0.18)
    span = rng.uniform(0.7, 1.0)
    chord = rng.uniform(0.25, 0.4)
    wing_x = rng.uniform(-0.1, 0.15)
    wing_t = rng.uniform(0.03, 0.05)
    fin_h = rng.uniform(0.25, 0.4)
    fin_c = rng.uniform(0.2, 0.3)
    fin_t = rng.uniform(0.03, 0.05)
    b = _Builder()
    b.box("body", (-length / 2, -half_w, -half_h), (length / 2, half_w, half_h), lab["body"])
    wz = (-wing_t / 2, wing_t / 2)
    wx = (wing_x - chord / 2, wing_x + chord / 2)
    b.box("lwing", (wx[0], half_w, wz[0]), (wx[1], half_w + span, wz[1]), lab["wing"], skip=("-y",))
    b.box("rwing", (wx[0], -half_w - span, wz[0]), (wx[1], -half_w, wz[1]), lab["wing"], skip=("+y",))
    fx = -length / 2
    b.box("fin", (fx, -fin_t / 2, half_h), (fx + fin_c, fin_t / 2, half_h + fin_h), lab["fin"],
          skip=("-z",))
    feats = {
        0: b.point("body", "+x"),
        1: b.point("fin", "+z"),
        2: b.point("lwing", "+y"),
        3: b.point("rwing", "-y"),
        4: b.point("lwing", "+x", 0.1, 0.5),
        5: b.point("rwing", "+x", 0.9, 0.5),
        6: b.point("body", "-x"),
    }
    return ToyShape(shape_id, WINGED, b.mesh(), feats)


def legged_shape(rng: np.random.Generator, shape_id: str = "l") -> ToyShape:
    lab = LABELS[LEGGED]
    sx = rng.uniform(0.35, 0.5)
    sy = rng.uniform(0.35, 0.5)
    st = rng.uniform(0.04, 0.07)
    leg_h = rng.uniform(0.6, 0.9)
    leg_w = rng.uniform(0.04, 0.06)
    back_h = rng.uniform(0.5, 0.8)
    back_t = rng.uniform(0.04, 0.07)
    b = _Builder()
    b.box("seat", (-sx, -sy, 0.0), (sx, sy, st), lab["seat"])
    legs = {"fl": (sx - leg_w, sy - leg_w), "fr": (sx - leg_w, -sy + leg_w),
            "bl": (-sx + leg_w, sy - leg_w), "br": (-sx + leg_w, -sy + leg_w)}
    for name, (cx, cy) in legs.items():
        b.box(name, (cx - leg_w, cy - leg_w, -leg_h), (cx + leg_w, cy + leg_w, 0.0), lab["leg"],
              skip=("+z",))
    b.box("back", (-sx, -sy, st), (-sx + back_t, sy, st + back_h), lab["back"], skip=("-z",))
    feats = {
        10: b.point("fl", "-z"),
        11: b.point("fr", "-z"),
        12: b.point("bl", "-z"),
        13: b.point("br", "-z"),
        14: b.point("back", "+z"),
        15: b.point("seat", "+x"),
    }
    return ToyShape(shape_id, LEGGED, b.mesh(), feats)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def make_dataset(n_per_class: int = 20, seed: int = 0) -> List[ToyShape]:
    """Shapes ordered class by class: w000, w001, ..., l000, l001, ..."""
    rng = np.random.default_rng(seed)
    shapes = [winged_shape(rng, f"w{i:03d}") for i in range(n_per_class)]
    shapes += [legged_shape(rng, f"l{i:03d}") for i in range(n_per_class)]
    return shapes


def split(shapes: List[ToyShape], n_test_per_class: int = 5, rotate_test: bool = True,
          seed: int = 0) -> Tuple[List[ToyShape], List[ToyShape]]:
    """Last ``n_test_per_class`` shapes of each class are held out (randomly rotated)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cat in (WINGED, LEGGED):
        members = [s for s in shapes if s.category == cat]
        train += members[:-n_test_per_class]
        for s in members[-n_test_per_class:]:
            test.append(s.rotated(random_rotation(rng)) if rotate_test else s)
    return train, test


# ------------------------------------------------------------------ experiment

@dataclass
class ToyConfig:
    n_per_class: int = 20
    n_test_per_class: int = 5
    n_points: int = 48          # training samples per shape
    n_rotations: int = 3        # randomly rotated renderings of each training shape
    iterations: int = 1000
    n_pos: int = 16
    n_neg: int = 16
    lr: float = 3e-4
    resolution: int = 32
    visibility_resolution: int = 64
    float32: bool = True
    seed: int = 0


@dataclass
class ToyResult:
    losses: List[float]
    cmc1: Dict[str, float]          # view setting -> symmetric rank-1 CMC on the test shapes
    cmc1_nonsym: Dict[str, float]
    positive_rank: float            # P(d(positive pair) < d(random pair)) on training data
    n_correspondences: int
    timings: Dict[str, float]
    model: object = None


# view settings compared on the held-out shapes: K medoids x M radii x L rotations
VIEW_SETTINGS = {"36": dict(), "9": dict(n_inplane=1), "3": dict(n_inplane=1, n_medoids=1)}


def _feature_samples(shape: ToyShape) -> Tuple[List[int], "SampleSet"]:
    from .geometry import SampleSet
    ids = sorted(shape.features)
    f = [shape.features[i] for i in ids]
    return ids, SampleSet(np.array([p.position for p in f]), np.array([p.normal for p in f]),
                          np.array([p.face_id for p in f]), np.array([p.label for p in f]))


def evaluate_toy(model, shapes: List[ToyShape], view_config) -> Tuple[float, float]:
    """(symmetric, non-symmetric) rank-1 CMC over feature points, candidates = features."""
    from .evaluation import FeaturePointSet, ShapeEmbedding, cmc_curve
    from .network import embed_many
    from .viewselect import MeshScene, ShapeViews
    embeds, points = [], {}
    for s in shapes:
        ids, samples = _feature_samples(s)
        views = ShapeViews(MeshScene(s.mesh, samples), view_config)
        desc = embed_many([views.stack(i).images for i in range(len(ids))], model)
        embeds.append(ShapeEmbedding(s.shape_id, ids, desc, samples.positions))
        points[s.shape_id] = dict(zip(ids, samples.positions))
    fp = FeaturePointSet(points, SYMMETRY)
    sym = cmc_curve(embeds, fp, True, max_rank=1, dense=False).y[0]
    nonsym = cmc_curve(embeds, fp, False, max_rank=1, dense=False).y[0]
    return float(sym), float(nonsym)


def run_toy_experiment(cfg: ToyConfig = ToyConfig(), log=None) -> ToyResult:
    """Synthetic end-to-end run: registration -> training -> evaluation on rotated held-out shapes.

    Each training shape is rendered under ``n_rotations`` random rotations; its
    copies are tied together by identity correspondences, and copies of
    different shapes by the registration correspondences of the originals.
    """
    import itertools
    import time

    from .geometry import SampleSet, area_weighted_sample
    from .network import DescriptorModel, NetworkConfig, PairSampler, StackCache, TrainState, train
    from .registration import CorrespondenceSet, LabeledPointSet, generate_pair_correspondences
    from .viewselect import MeshScene, ShapeViews, ViewConfig, ZeroVisibilityError

    say = log or (lambda *a: None)
    t0 = time.time()
    timings = {}
    shapes = make_dataset(cfg.n_per_class, cfg.seed)
    train_s, test_s = split(shapes, cfg.n_test_per_class, rotate_test=True, seed=cfg.seed + 1)
    vcfg = ViewConfig(resolution=cfg.resolution, visibility_resolution=cfg.visibility_resolution,
                      seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 2)

    samples = {s.shape_id: area_weighted_sample(s.mesh, cfg.n_points, cfg.seed * 1000 + k)
               for k, s in enumerate(train_s)}
    pair_sets = []
    for a, b in itertools.combinations(train_s, 2):
        if a.category != b.category:
            continue
        sa, sb = samples[a.shape_id], samples[b.shape_id]
        c = generate_pair_correspondences(LabeledPointSet(sa.positions, sa.labels, a.shape_id),
                                          LabeledPointSet(sb.positions, sb.labels, b.shape_id))
        pair_sets.append((a.shape_id, b.shape_id, np.stack([c.idx_a, c.idx_b], 1)))
    timings["registration"] = time.time() - t0
    say(f"registered {len(pair_sets)} pairs in {timings['registration']:.0f}s")

    copies = lambda sid: [f"{sid}@{r}" for r in range(cfg.n_rotations)]
    corr = []
    for a, b, pairs in pair_sets:
        for ca, cb in itertools.product(copies(a), copies(b)):
            corr.append(CorrespondenceSet.from_pairs(ca, cb, pairs))
    for s in train_s:
        ident = np.stack([np.arange(cfg.n_points)] * 2, 1)
        for ca, cb in itertools.combinations(copies(s.shape_id), 2):
            corr.append(CorrespondenceSet.from_pairs(ca, cb, ident))
    corr = CorrespondenceSet.concat(corr)

    views, positions = {}, {}
    for s in train_s:
        smp = samples[s.shape_id]
        for cid in copies(s.shape_id):
            R = random_rotation(rng)
            rotated = SampleSet(smp.positions @ R.T, smp.normals @ R.T, smp.face_ids, smp.labels)
            views[cid] = ShapeViews(MeshScene(s.mesh.transformed(R), rotated), vcfg)
            positions[cid] = smp.positions
    sampler = PairSampler(corr, positions)
    dtype = np.float32 if cfg.float32 else np.float64
    stacks = StackCache(views, dtype)
    for cid in sorted(views):
        for i in range(cfg.n_points):
            try:
                stacks.get(cid, i)
            except ZeroVisibilityError:
                sampler.unusable.add((cid, i))
    timings["rendering"] = time.time() - t0 - timings["registration"]
    say(f"rendered {len(views) * cfg.n_points} stacks in {timings['rendering']:.0f}s "
        f"({len(sampler.unusable)} without a visible view)")

    model = DescriptorModel.initialize(NetworkConfig(input_resolution=cfg.resolution), cfg.seed)
    model = model.astype(dtype)
    t1 = time.time()
    cb = (lambda i, l: say(f"iter {i} loss {l:.4g} ({time.time() - t1:.0f}s)") if i % 100 == 0 else None)
    model, losses = train(model, sampler, stacks, cfg.iterations, seed=cfg.seed + 3,
                          state=TrainState(lr=cfg.lr), n_pos=cfg.n_pos, n_neg=cfg.n_neg, callback=cb)
    timings["training"] = time.time() - t1

    # training-set separation: positive vs random pair distances
    from .network import embed_many
    erng = np.random.default_rng(cfg.seed + 4)
    pos = [sampler.positive(erng) for _ in range(100)]
    keys = sorted(views)
    rnd = []
    while len(rnd) < 100:
        d = (keys[erng.integers(len(keys))], int(erng.integers(cfg.n_points)),
             keys[erng.integers(len(keys))], int(erng.integers(cfg.n_points)))
        if sampler._usable(d):
            rnd.append(d)
    dist = lambda ds: np.array([np.linalg.norm(x - y) for x, y in zip(
        embed_many([stacks.get(d[0], d[1]) for d in ds], model),
        embed_many([stacks.get(d[2], d[3]) for d in ds], model))])
    dp, dr = dist(pos), dist(rnd)
    positive_rank = float((dp[:, None] < dr[None, :]).mean())

    t2 = time.time()
    cmc1, cmc1_nonsym = {}, {}
    for name, kw in VIEW_SETTINGS.items():
        vc = ViewConfig(resolution=cfg.resolution, visibility_resolution=cfg.visibility_resolution,
                        seed=cfg.seed, **kw)
        cmc1[name], cmc1_nonsym[name] = evaluate_toy(model, test_s, vc)
        say(f"{name} views: symmetric CMC@1 {cmc1[name]:.3f}, non-symmetric {cmc1_nonsym[name]:.3f}")
    timings["evaluation"] = time.time() - t2
    timings["total"] = time.time() - t0
    return ToyResult(losses, cmc1, cmc1_nonsym, positive_rank, len(corr), timings, model)

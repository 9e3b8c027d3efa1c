"""Command-line pipeline: sample -> register -> train -> embed -> evaluate, plus match.

Configuration is a flat ``key = value`` file with dotted sections (see
``DEFAULTS``); ``--set key=value`` overrides single keys. Every stage draws its
randomness from ``stage_seed(seed, stage_name)``.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .evaluation import (FeaturePointSet, ShapeEmbedding, cmc_curve, correspondence_accuracy,
                         dense_match_colors, load_features, load_symmetry, write_curve)
from .geometry import (MeshFormatError, SampleSet, TriangleMesh, area_weighted_sample,
                       closest_point_on_mesh, load_mesh, load_xyz)
from .network import (ConvSpec, DescriptorModel, ModelFormatError, NetworkConfig, NumericalError,
                      PairSampler, StackCache, TrainState, embed_many, load_descriptors, load_model,
                      save_descriptors, save_model, train, write_loss_log)
from .registration import (CorrespondenceSet, LabeledPointSet, NoSharedLabelsError,
                           generate_pair_correspondences, read_correspondences,
                           write_correspondences)
from .viewselect import CloudScene, MeshScene, ShapeViews, ViewConfig, ZeroVisibilityError

log = logging.getLogger("mvdesc")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class InputError(ValueError):
    """Bad manifest, config or file contents (exit code 1)."""


# ---------------------------------------------------------------------- config

DEFAULTS: Dict[str, str] = {
    "seed": "0",
    "view.n_directions": "150",
    "view.n_medoids": "3",
    "view.radii": "0.25,0.5,0.75",
    "view.n_inplane": "4",
    "view.resolution": "64",
    "view.vertical_fov_deg": "50",
    "view.visibility_resolution": "128",
    "view.kmedoids_restarts": "4",
    "network.input_resolution": "64",
    "network.convs": "8,5,1,2,2;16,5,1,2,2",
    "network.view_descriptor_dim": "256",
    "network.output_dim": "128",
    "network.pooling_mode": "max",
    "registration.k": "6",
    "registration.max_iters": "30",
    "registration.smooth_weight": "auto",
    "train.iterations": "1000",
    "train.batch": "64",
    "train.positive_fraction": "0.5",
    "train.lr": "0.0001",
    "train.margin": "1",
    "train.weight_decay": "0.0005",
    "train.negative_exclusion": "0.05",
    "embed.dense_points": "256",
    "eval.candidates": "dense",
    "eval.thresholds": "0,0.025,0.05,0.075,0.1,0.125,0.15,0.175,0.2,0.225,0.25",
    "eval.max_rank": "0",
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}: line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise InputError(f"{source}: line {lineno}: unknown key {k!r}")
        out[k] = v
    return out


@dataclass
class PipelineConfig:
    values: Dict[str, str]

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Sequence[str] = ()) -> "PipelineConfig":
        vals = dict(DEFAULTS)
        if path:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise InputError(f"cannot read config {path}: {exc}") from None
            vals.update(parse_config_text(text, path))
        vals.update(parse_config_text("\n".join(overrides), "--set"))
        cfg = cls(vals)
        cfg.view_config()
        cfg.network_config()   # validate everything up front
        cfg.train_state()
        return cfg

    def get(self, key: str) -> str:
        return self.values[key]

    def num(self, key: str, kind=float):
        try:
            return kind(self.values[key])
        except ValueError:
            raise InputError(f"config key {key}: bad value {self.values[key]!r}") from None

    def floats(self, key: str) -> Tuple[float, ...]:
        try:
            return tuple(float(x) for x in self.values[key].split(",") if x.strip())
        except ValueError:
            raise InputError(f"config key {key}: bad list {self.values[key]!r}") from None

    @property
    def seed(self) -> int:
        return self.num("seed", int)

    def view_config(self) -> ViewConfig:
        try:
            return ViewConfig(n_directions=self.num("view.n_directions", int),
                              n_medoids=self.num("view.n_medoids", int),
                              radii=self.floats("view.radii"),
                              n_inplane=self.num("view.n_inplane", int),
                              resolution=self.num("view.resolution", int),
                              vertical_fov_deg=self.num("view.vertical_fov_deg"),
                              visibility_resolution=self.num("view.visibility_resolution", int),
                              kmedoids_restarts=self.num("view.kmedoids_restarts", int),
                              seed=stage_seed(self.seed, "view"))
        except ValueError as exc:
            raise InputError(f"view config: {exc}") from None

    def network_config(self) -> NetworkConfig:
        try:
            convs = tuple(ConvSpec(*[int(x) for x in part.split(",")])
                          for part in self.get("network.convs").split(";") if part.strip())
            cfg = NetworkConfig(self.num("network.input_resolution", int), convs,
                                self.num("network.view_descriptor_dim", int),
                                self.num("network.output_dim", int), self.get("network.pooling_mode"))
        except (ValueError, TypeError) as exc:
            raise InputError(f"network config: {exc}") from None
        if cfg.input_resolution != self.num("view.resolution", int):
            raise InputError("view.resolution must equal network.input_resolution")
        return cfg

    def smooth_weight(self) -> Optional[float]:
        v = self.get("registration.smooth_weight")
        return None if v == "auto" else self.num("registration.smooth_weight")

    def train_state(self) -> TrainState:
        return TrainState(lr=self.num("train.lr"), margin=self.num("train.margin"),
                          weight_decay=self.num("train.weight_decay"))

    def batch_split(self) -> Tuple[int, int]:
        batch = self.num("train.batch", int)
        n_pos = int(round(batch * self.num("train.positive_fraction")))
        if batch < 1 or not 0 <= n_pos <= batch:
            raise InputError("train.batch must be positive and train.positive_fraction in [0, 1]")
        return n_pos, batch - n_pos


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible integer seed for a named stage."""
    return int(np.random.default_rng([int(seed), zlib.crc32(stage.encode())]).integers(2 ** 31))


# -------------------------------------------------------------------- manifest

@dataclass
class ManifestEntry:
    shape_id: str
    mesh_path: Path
    label_path: Optional[Path]
    category: str

    @property
    def is_cloud(self) -> bool:
        return self.mesh_path.suffix.lower() in (".xyz", ".pts", ".txt")


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    seed: int = 0

    def ids(self) -> List[str]:
        return [e.shape_id for e in self.entries]

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {e.shape_id: e for e in self.entries}


def load_manifest(path) -> Manifest:
    """CSV rows ``shape_id,mesh_path,label_path,category``; an optional
    ``# seed: N`` comment line; paths relative to the manifest's directory."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from None
    seed, rows = 0, []
    for line in lines:
        s = line.strip()
        if s.startswith("#"):
            body = s[1:].strip()
            if body.startswith("seed:"):
                try:
                    seed = int(body.split(":", 1)[1])
                except ValueError:
                    raise InputError(f"{path}: bad seed line {s!r}") from None
        elif s:
            rows.append(s)
    entries, seen = [], set()
    for lineno, row in enumerate(csv.reader(rows), 1):
        if row[:1] == ["shape_id"]:
            continue
        if len(row) != 4:
            raise InputError(f"{path}: row {lineno}: expected shape_id,mesh_path,label_path,category")
        sid, mesh, labels, cat = (c.strip() for c in row)
        if sid in seen:
            raise InputError(f"{path}: duplicate shape id {sid!r}")
        seen.add(sid)
        mp = (path.parent / mesh)
        lp = (path.parent / labels) if labels else None
        for p in (mp, lp):
            if p is not None and not p.exists():
                raise InputError(f"shape {sid}: missing file {p}")
        entries.append(ManifestEntry(sid, mp, lp, cat))
    if not entries:
        raise InputError(f"{path}: manifest lists no shapes")
    return Manifest(entries, seed)


def write_manifest(path, entries: Sequence[ManifestEntry], seed: int) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed: {seed}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shape_id", "mesh_path", "label_path", "category"])
        for e in entries:
            rel = lambda p: "" if p is None else str(Path(p).relative_to(path.parent))
            w.writerow([e.shape_id, rel(e.mesh_path), rel(e.label_path), e.category])


# ---------------------------------------------------------------------- shapes

def load_shape(entry: ManifestEntry):
    """(mesh or None, cloud points or None, cloud normals or None)."""
    if entry.is_cloud:
        pts, nrm = load_xyz(entry.mesh_path)
        return None, pts, nrm
    return load_mesh(entry.mesh_path, entry.label_path), None, None


def save_samples(path, s: SampleSet) -> None:
    labels = s.labels if s.labels is not None else np.full(len(s), -1)
    rows = np.column_stack([s.positions, s.normals, s.face_ids, labels])
    with open(path, "w") as fh:
        fh.write("# x y z nx ny nz face label\n")
        for r in rows:
            fh.write(" ".join(repr(float(v)) for v in r[:6]) + f" {int(r[6])} {int(r[7])}\n")


def load_samples(path) -> SampleSet:
    try:
        a = np.loadtxt(path, comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read samples {path}: {exc}") from None
    if a.shape[1] != 8:
        raise InputError(f"{path}: expected 8 columns")
    labels = a[:, 7].astype(np.int64)
    return SampleSet(a[:, :3], a[:, 3:6], a[:, 6].astype(np.int64),
                     None if np.all(labels < 0) else labels)


def _scene(entry: ManifestEntry, samples: SampleSet):
    mesh, pts, nrm = load_shape(entry)
    if mesh is not None:
        return MeshScene(mesh, samples)
    return CloudScene(samples.positions, samples.normals if nrm is not None else None)


def _parallel_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))    # order follows the inputs


# -------------------------------------------------------------------- commands

def cmd_sample(args, cfg: PipelineConfig) -> None:
    man = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = stage_seed(cfg.seed + man.seed, "sample")
    for i, e in enumerate(man.entries):
        try:
            mesh, pts, nrm = load_shape(e)
        except (OSError, MeshFormatError) as exc:
            raise InputError(f"shape {e.shape_id}: {exc}") from None
        if mesh is not None:
            s = area_weighted_sample(mesh, args.n_points, base + i)
        else:
            rng = np.random.default_rng(base + i)
            idx = np.sort(rng.choice(len(pts), min(args.n_points, len(pts)), replace=False))
            normals = nrm[idx] if nrm is not None else np.zeros((len(idx), 3))
            s = SampleSet(pts[idx], normals, np.full(len(idx), -1))
        save_samples(out / f"{e.shape_id}.txt", s)
    log.info("sampled %d shapes into %s", len(man.entries), out)


def _register_pair(job):
    (ida, pa, la), (idb, pb, lb), max_iters, w, k = job
    try:
        c = generate_pair_correspondences(LabeledPointSet(pa, la, ida), LabeledPointSet(pb, lb, idb),
                                          max_iters=max_iters, smooth_weight=w, k=k)
        return c, None
    except NoSharedLabelsError as exc:
        return None, str(exc)


def cmd_register(args, cfg: PipelineConfig) -> None:
    man = load_manifest(args.manifest)
    ids = man.by_id()
    sdir = Path(args.samples)
    if args.pairs:
        pairs = []
        for lineno, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            if len(parts) != 2 or any(p not in ids for p in parts):
                raise InputError(f"{args.pairs}: line {lineno}: expected two known shape ids")
            pairs.append(tuple(parts))
    else:
        pairs = [(a.shape_id, b.shape_id) for a, b in itertools.combinations(man.entries, 2)
                 if a.category == b.category]
    data = {}
    for sid in sorted({s for p in pairs for s in p}):
        s = load_samples(sdir / f"{sid}.txt")
        if s.labels is None:
            raise InputError(f"shape {sid}: samples carry no part labels")
        data[sid] = (sid, s.positions, s.labels)
    jobs = [(data[a], data[b], cfg.num("registration.max_iters", int), cfg.smooth_weight(),
             cfg.num("registration.k", int)) for a, b in pairs]
    results = _parallel_map(_register_pair, jobs, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kept, skipped = [], []
    stats: Dict[str, List[int]] = {}
    for (a, b), (corr, err) in zip(pairs, results):
        cat = ids[a].category
        row = stats.setdefault(cat, [0, 0, 0])
        if corr is None:
            skipped.append(f"{a} {b} {err}")
            continue
        kept.append(corr)
        row[1] += 1
        row[2] += len(corr)
    for cat in stats:
        stats[cat][0] = sum(1 for e in man.entries if e.category == cat)
    write_correspondences(out / "correspondences.txt",
                          CorrespondenceSet.concat(kept))
    with open(out / "stats.csv", "w") as fh:
        fh.write("category,#shapes,#pairs,#correspondences\n")
        for cat in sorted(stats):
            fh.write(f"{cat},{stats[cat][0]},{stats[cat][1]},{stats[cat][2]}\n")
    with open(out / "skipped.txt", "w") as fh:
        fh.write("".join(s + "\n" for s in skipped))
    log.info("registered %d pairs (%d skipped)", len(kept), len(skipped))


def cmd_train(args, cfg: PipelineConfig) -> None:
    man = load_manifest(args.manifest)
    ids = man.by_id()
    try:
        corr = read_correspondences(args.correspondences)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read correspondences: {exc}") from None
    if len(corr) == 0:
        raise InputError("correspondence file is empty")
    sdir = Path(args.samples)
    vcfg = cfg.view_config()
    views, positions = {}, {}
    for sid in sorted(set(corr.shape_a) | set(corr.shape_b)):
        if sid not in ids:
            raise InputError(f"correspondences mention unknown shape {sid!r}")
        s = load_samples(sdir / f"{sid}.txt")
        views[sid] = ShapeViews(_scene(ids[sid], s), vcfg)
        positions[sid] = s.positions
    sampler = PairSampler(corr, positions, exclusion=cfg.num("train.negative_exclusion"))
    model = DescriptorModel.initialize(cfg.network_config(), stage_seed(cfg.seed, "init"))
    n_pos, n_neg = cfg.batch_split()
    model, losses = train(model, sampler, StackCache(views), cfg.num("train.iterations", int),
                          stage_seed(cfg.seed, "train"), cfg.train_state(), n_pos, n_neg)
    save_model(args.out, model)
    write_loss_log(args.loss_csv or str(Path(args.out).with_suffix(".loss.csv")), losses)
    log.info("trained %d iterations, final loss %.4g", len(losses), losses[-1] if losses else 0.0)


def _embed_shape(job):
    entry, points, fids, vcfg, model = job
    scene = _scene(entry, points)
    views = ShapeViews(scene, vcfg)
    keep, stacks = [], []
    for i in range(len(points)):
        try:
            stacks.append(views.stack(i).images)
            keep.append(i)
        except ZeroVisibilityError:
            if fids[i] >= 0:
                return None, f"shape {entry.shape_id}: feature {fids[i]} is not visible"
    desc = embed_many(stacks, model) if stacks else np.zeros((0, model.config.output_dim))
    return (np.array(keep, dtype=np.int64), desc), None


def _feature_samples(entry: ManifestEntry, feats: Dict[int, np.ndarray]) -> SampleSet:
    mesh, pts, nrm = load_shape(entry)
    fpos = np.array([feats[f] for f in sorted(feats)]).reshape(-1, 3)
    if mesh is not None:
        return closest_point_on_mesh(mesh, fpos)
    from .geometry import closest_points
    idx, _ = closest_points(fpos, pts)
    normals = nrm[idx] if nrm is not None else np.zeros((len(idx), 3))
    return SampleSet(pts[idx], normals, np.full(len(idx), -1))


def cmd_embed(args, cfg: PipelineConfig) -> None:
    man = load_manifest(args.manifest)
    try:
        model = load_model(args.model)
    except ModelFormatError:
        raise
    except OSError as exc:
        raise InputError(f"cannot read model: {exc}") from None
    vcfg = cfg.view_config()
    if vcfg.resolution != model.config.input_resolution:
        raise InputError("view.resolution does not match the model's input resolution")
    feats = load_features(args.features) if args.features else {}
    n_dense = args.dense_points if args.dense_points is not None else cfg.num("embed.dense_points", int)
    jobs = []
    for e in man.entries:
        parts, fids = [], []
        if e.shape_id in feats:
            fs = _feature_samples(e, feats[e.shape_id])
            parts.append(fs)
            fids += sorted(feats[e.shape_id])
        if args.samples and n_dense > 0:
            s = load_samples(Path(args.samples) / f"{e.shape_id}.txt")
            s = s.subset(np.arange(min(n_dense, len(s))))
            parts.append(SampleSet(s.positions, s.normals, s.face_ids))
            fids += [-1] * len(s)
        if not parts:
            continue
        pts = SampleSet(np.vstack([p.positions for p in parts]), np.vstack([p.normals for p in parts]),
                        np.concatenate([p.face_ids for p in parts]))
        jobs.append((e, pts, fids, vcfg, model))
    if not jobs:
        raise InputError("nothing to embed: give --features and/or --samples")
    results = _parallel_map(_embed_shape, jobs, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (e, pts, fids, _, _), (res, err) in zip(jobs, results):
        if err:
            raise InputError(err)
        keep, desc = res
        save_descriptors(out / f"{e.shape_id}.desc", desc)
        with open(out / f"{e.shape_id}.pts", "w") as fh:
            fh.write("# feature_id x y z   (feature_id -1: dense sample)\n")
            for i in keep:
                x, y, z = (float(v) for v in pts.positions[i])
                fh.write(f"{fids[i]} {x!r} {y!r} {z!r}\n")
    log.info("embedded %d shapes into %s", len(jobs), out)


def _read_embedding(directory: Path, sid: str) -> ShapeEmbedding:
    desc = load_descriptors(directory / f"{sid}.desc")
    rows = np.loadtxt(directory / f"{sid}.pts", comments="#", ndmin=2)
    fid = rows[:, 0].astype(np.int64)
    f, s = fid >= 0, fid < 0
    return ShapeEmbedding(sid, fid[f].tolist(), desc[f], rows[f, 1:4],
                          desc[s] if s.any() else None, rows[s, 1:4] if s.any() else None)


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    if args.symmetric and not args.symmetry:
        raise InputError("--symmetric needs --symmetry FILE")
    d = Path(args.descriptors)
    sids = sorted(p.stem for p in d.glob("*.desc"))
    if len(sids) < 2:
        raise InputError(f"{d}: need descriptor files for at least two shapes")
    try:
        feats = load_features(args.features)
        sym = load_symmetry(args.symmetry) if args.symmetry else None
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    embeds = [_read_embedding(d, s) for s in sids]
    for e in embeds:
        missing = set(feats.get(e.shape_id, {})) - set(e.feature_ids)
        if missing:
            raise InputError(f"shape {e.shape_id}: missing feature embeddings {sorted(missing)}")
    fp = FeaturePointSet(feats, sym)
    dense = cfg.get("eval.candidates") == "dense"
    max_rank = cfg.num("eval.max_rank", int) or None
    th = cfg.floats("eval.thresholds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for symmetric in ((False, True) if sym is not None else (False,)):
        tag = "sym" if symmetric else "nosym"
        write_curve(out / f"cmc_{tag}.csv", cmc_curve(embeds, fp, symmetric, max_rank, dense))
        write_curve(out / f"accuracy_{tag}.csv", correspondence_accuracy(embeds, fp, symmetric, th, dense))
    log.info("wrote curves to %s", out)


def _match_side(path: str, n: int, seed: int):
    p = Path(path)
    entry = ManifestEntry(p.stem, p, None, "")
    mesh, pts, nrm = load_shape(entry)
    if mesh is not None:
        s = area_weighted_sample(mesh, n, seed)
        s = SampleSet(s.positions, s.normals, s.face_ids)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(pts), min(n, len(pts)), replace=False))
        s = SampleSet(pts[idx], nrm[idx] if nrm is not None else np.zeros((len(idx), 3)),
                      np.full(len(idx), -1))
    return entry, s


def cmd_match(args, cfg: PipelineConfig) -> None:
    model = load_model(args.model)
    vcfg = cfg.view_config()
    sides = []
    for tag, path in (("a", args.a), ("b", args.b)):
        entry, s = _match_side(path, args.n_points, stage_seed(cfg.seed, "match"))
        (keep, desc), err = _embed_shape((entry, s, [-1] * len(s), vcfg, model))
        sides.append((s.positions[keep], desc))
    (pa, da), (pb, db) = sides
    ca, cb = dense_match_colors(pa, da, pb, db)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, pts, col in (("a_colored.xyz", pa, ca), ("b_colored.xyz", pb, cb)):
        with open(out / name, "w") as fh:
            for p, c in zip(pts, col):
                fh.write(" ".join(f"{float(v):.9g}" for v in p) + " "
                         + " ".join(f"{float(v):.6f}" for v in c) + "\n")
    log.info("wrote colored point sets to %s", out)


def cmd_toy_data(args, cfg: PipelineConfig) -> None:
    """Write the synthetic two-class dataset as OBJ + labels + manifests + features."""
    from .geometry import save_mesh
    from .toy import SYMMETRY, make_dataset, split
    shapes = make_dataset(args.per_class, stage_seed(cfg.seed, "toy"))
    train_s, test_s = split(shapes, args.test_per_class, rotate_test=not args.no_rotate,
                            seed=stage_seed(cfg.seed, "toy-split"))
    out = Path(args.out)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    for name, group in (("train", train_s), ("test", test_s)):
        entries = []
        with open(out / f"features_{name}.txt", "w") as fh:
            for s in group:
                mp, lp = out / "meshes" / f"{s.shape_id}.obj", out / "meshes" / f"{s.shape_id}.labels"
                save_mesh(s.mesh, mp, lp)
                entries.append(ManifestEntry(s.shape_id, mp, lp, s.category))
                for fid in sorted(s.features):
                    x, y, z = (float(v) for v in s.features[fid].position)
                    fh.write(f"{s.shape_id} {fid} {x!r} {y!r} {z!r}\n")
        write_manifest(out / f"manifest_{name}.csv", entries, cfg.seed)
    with open(out / "symmetry.txt", "w") as fh:
        for a in sorted(SYMMETRY):
            fh.write(f"{a} {SYMMETRY[a]}\n")
    log.info("wrote %d training and %d test shapes to %s", len(train_s), len(test_s), out)


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvdesc", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    ap.add_argument("--seed", type=int, help="global seed (overrides the config)")
    ap.add_argument("--workers", type=int, default=1, help="process pool size for per-shape stages")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="area-weighted surface samples per shape")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("register", help="part-guided registration -> correspondences")
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pairs", help="file of 'shape_a shape_b' lines")
    g.add_argument("--all-pairs-per-category", action="store_true", help="(default)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train the descriptor network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--correspondences", required=True)
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="descriptors for feature points and/or dense samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--features")
    p.add_argument("--samples")
    p.add_argument("--dense-points", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", help="CMC and correspondence-accuracy curves")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--symmetry")
    p.add_argument("--symmetric", action="store_true", help="require symmetric curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("match", help="dense nearest-descriptor color transfer between two shapes")
    p.add_argument("--a", required=True, help="mesh (.obj) or point cloud (.xyz)")
    p.add_argument("--b", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--n-points", type=int, default=512)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("toy-data", help="write the synthetic winged/legged dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--test-per-class", type=int, default=5)
    p.add_argument("--no-rotate", action="store_true", help="keep test shapes unrotated")
    p.set_defaults(func=cmd_toy_data)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set) + ([f"seed = {args.seed}"] if args.seed is not None else [])
        cfg = PipelineConfig.load(args.config, overrides)
        args.func(args, cfg)
    except (NumericalError, FloatingPointError) as exc:
        print(f"mvdesc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, MeshFormatError, ModelFormatError, ValueError, OSError, KeyError) as exc:
        print(f"mvdesc: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Independent reference implementations used as test oracles."""
import itertools

import numpy as np

from mvdesc.evaluation import ShapeEmbedding
from mvdesc.geometry import TriangleMesh


def uv_sphere(nu=21, nv=13, radius=1.0, center=(0.0, 0.0, 0.0)):
    """UV sphere; the default has 504 faces."""
    vs, fs = [], []
    vs.append([0, 0, 1])
    for i in range(1, nv):
        th = np.pi * i / nv
        for j in range(nu):
            ph = 2 * np.pi * j / nu
            vs.append([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])
    vs.append([0, 0, -1])
    ring = lambda i, j: 1 + (i - 1) * nu + (j % nu)
    south = len(vs) - 1
    for j in range(nu):
        fs.append([0, ring(1, j), ring(1, j + 1)])
        fs.append([south, ring(nv - 1, j + 1), ring(nv - 1, j)])
    for i in range(1, nv - 1):
        for j in range(nu):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            fs += [[a, c, b], [b, c, d]]
    return TriangleMesh(np.array(vs) * radius + np.asarray(center), fs)


def box_mesh(lo=(-1, -1, -1), hi=(1, 1, 1), open_top=False):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                  for i in (0, 1) for j in (0, 1) for k in (0, 1)])
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4]]
    if not open_top:
        f += [[1, 5, 7], [1, 7, 3]]
    return TriangleMesh(v, f)


def ray_hits(origins, dirs, tris, eps=1e-12):
    """Möller–Trumbore: (n_rays, n_tris) ray parameters, inf where missed."""
    o = np.asarray(origins, float)[:, None, :]
    d = np.asarray(dirs, float)[:, None, :]
    v0, v1, v2 = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = (e1 * p).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o - v0
        u = (s * p).sum(-1) * inv
        q = np.cross(s, e1)
        v = (d * q).sum(-1) * inv
        t = (e2 * q).sum(-1) * inv
        ok = (np.abs(det) > eps) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return np.where(ok, t, np.inf)


def visible_from_eye(mesh, points, eye, rel_tol=1e-6):
    """A point is visible if nothing is hit strictly before it on the eye->point segment."""
    eye = np.asarray(eye, float)
    diff = np.asarray(points, float) - eye
    dist = np.linalg.norm(diff, axis=1)
    t = ray_hits(np.repeat(eye[None], len(diff), 0), diff / dist[:, None], mesh.triangles)
    return t.min(axis=1) >= dist * (1 - rel_tol)


def in_frustum(cam, points):
    f = cam.target - cam.eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, cam.up)
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    q = np.asarray(points, float) - cam.eye
    x, y, z = q @ r, q @ u, q @ f
    t = np.tan(cam.vertical_fov / 2)
    return (z >= cam.near) & (z <= cam.far) & (np.abs(x) < z * t) & (np.abs(y) < z * t)


def exhaustive_medoids(D, K):
    """(best cost, list of all optimal sorted medoid tuples)."""
    best, sets = np.inf, []
    for combo in itertools.combinations(range(len(D)), K):
        c = D[:, list(combo)].min(axis=1).sum()
        if c < best - 1e-12:
            best, sets = c, [combo]
        elif abs(c - best) <= 1e-12:
            sets.append(combo)
    return best, sets


def cmc_oracle(shapes, symmetry, allow_symmetry, dense):
    """Direct enumeration with explicit loops. ``shapes`` = list of dicts with
    keys ids, fdesc, fpos, sdesc, spos."""
    ranks = []
    for a, b in itertools.permutations(range(len(shapes)), 2):
        A, B = shapes[a], shapes[b]
        cand = list(B["fdesc"]) + (list(B["sdesc"]) if dense else [])
        for k, fid in enumerate(A["ids"]):
            if fid not in B["ids"]:
                continue
            targets = [B["ids"].index(fid)]
            if allow_symmetry and symmetry.get(fid, fid) in B["ids"] and symmetry.get(fid, fid) != fid:
                targets.append(B["ids"].index(symmetry[fid]))
            dists = [sum((x - y) ** 2 for x, y in zip(A["fdesc"][k], c)) for c in cand]
            best = None
            for g in targets:
                r = 1
                for dd in dists:
                    if dd < dists[g]:
                        r += 1
                best = r if best is None else min(best, r)
            ranks.append(best)
    return ranks


def accuracy_oracle(shapes, symmetry, allow_symmetry, dense, radii):
    errs = []
    for a, b in itertools.permutations(range(len(shapes)), 2):
        A, B = shapes[a], shapes[b]
        cand = list(B["fdesc"]) + (list(B["sdesc"]) if dense else [])
        pos = list(B["fpos"]) + (list(B["spos"]) if dense else [])
        for k, fid in enumerate(A["ids"]):
            if fid not in B["ids"]:
                continue
            targets = [B["ids"].index(fid)]
            if allow_symmetry and symmetry.get(fid, fid) in B["ids"] and symmetry.get(fid, fid) != fid:
                targets.append(B["ids"].index(symmetry[fid]))
            best_j, best_d = 0, np.inf
            for j, c in enumerate(cand):
                dd = sum((x - y) ** 2 for x, y in zip(A["fdesc"][k], c))
                if dd < best_d:
                    best_j, best_d = j, dd
            e = min(np.sqrt(sum((x - y) ** 2 for x, y in zip(pos[best_j], pos[g]))) for g in targets)
            errs.append(e / radii[b])
    return errs


def conv_loops(x, w, b, stride=1):
    """Direct-loop valid convolution (cross-correlation): x (C,H,W), w (O,C,k,k)."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    ho, wo = (H - k) // stride + 1, (W - k) // stride + 1
    out = np.zeros((O, ho, wo))
    for o in range(O):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            acc += x[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc
    return out


def pool_loops(x, window, stride):
    C, H, W = x.shape
    ho, wo = (H - window) // stride + 1, (W - window) // stride + 1
    out = np.zeros((C, ho, wo))
    for c in range(C):
        for i in range(ho):
            for j in range(wo):
                out[c, i, j] = max(x[c, i * stride + u, j * stride + v]
                                   for u in range(window) for v in range(window))
    return out


def fd_check(loss_fn, params, grads, rng, h=1e-6, full_limit=256, n_sample=24):
    """Central finite differences against analytic ``grads``.

    Tensors with at most ``full_limit`` entries are checked on every entry;
    larger ones on ``n_sample`` random entries. Every tensor additionally gets a
    random-direction derivative over all its entries. Returns {name: worst
    relative error}.
    """
    worst = {}
    for name, p in params.items():
        g = grads[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= full_limit else rng.choice(flat.size, n_sample, replace=False)
        scale = max(np.abs(g).max(), 1e-12)
        errs = []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            an = g.reshape(-1)[i]
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-3 * scale))
        d = rng.normal(size=p.shape)
        d /= np.linalg.norm(d)
        old = p.copy()
        p += h * d
        lp = loss_fn()
        p[...] = old - h * d
        lm = loss_fn()
        p[...] = old
        fd = (lp - lm) / (2 * h)
        an = float((g * d).sum())
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-3 * scale))
        worst[name] = max(errs)
    return worst


def random_metric_instance(rng):
    """Random embeddings (<= 5 shapes, <= 50 points each) plus their plain-dict mirror for the oracles."""
    n_shapes = int(rng.integers(2, 6))
    n_feat = int(rng.integers(2, 9))
    sym = {0: 1, 1: 0} if n_feat >= 2 else {}
    if n_feat >= 4:
        sym.update({2: 3, 3: 2})
    shapes, dicts = [], []
    for s in range(n_shapes):
        ids = sorted(rng.choice(n_feat, int(rng.integers(1, n_feat + 1)), replace=False).tolist())
        n_samp = int(rng.integers(0, 50 - len(ids)))
        # coarse integer codes make exact distance ties common
        fd = rng.integers(0, 3, (len(ids), 3)).astype(float)
        sd = rng.integers(0, 3, (n_samp, 3)).astype(float)
        fpos, spos = rng.normal(size=(len(ids), 3)), rng.normal(size=(n_samp, 3))
        r = float(rng.uniform(0.5, 2))
        shapes.append(ShapeEmbedding(f"s{s}", ids, fd, fpos, sd, spos, r))
        dicts.append(dict(ids=ids, fdesc=fd.tolist(), fpos=fpos.tolist(), sdesc=sd.tolist(),
                          spos=spos.tolist(), r=r))
    return shapes, dicts, sym

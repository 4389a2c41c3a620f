"""Slow, independent reference implementations used only by the tests."""
from collections import deque
import itertools

import numpy as np

_OPPOSITE = {"R": "L", "L": "R", "A": "P", "P": "A", "S": "I", "I": "S"}


def neighbour_offsets(connectivity):
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        n = sum(abs(x) for x in d)
        if n == 0:
            continue
        if (connectivity == 6 and n == 1) or (connectivity == 18 and n <= 2) or connectivity == 26:
            out.append(d)
    return out


def flood_fill_components(mask, connectivity):
    """List of (seed linear index, voxel set) in raster order of seeds."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offsets = neighbour_offsets(connectivity)
    comps = []
    for lin in range(mask.size):
        start = np.unravel_index(lin, mask.shape)
        if not mask[start] or seen[start]:
            continue
        voxels = set()
        queue = deque([start])
        seen[start] = True
        while queue:
            v = queue.popleft()
            voxels.add(v)
            for d in offsets:
                w = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if all(0 <= w[k] < mask.shape[k] for k in range(3)) and mask[w] and not seen[w]:
                    seen[w] = True
                    queue.append(w)
        comps.append((lin, voxels))
    return comps


def largest_component_oracle(mask, connectivity):
    comps = flood_fill_components(mask, connectivity)
    out = np.zeros(np.shape(mask), dtype=bool)
    if not comps:
        return out
    best = max(comps, key=lambda c: (len(c[1]), -c[0]))
    for v in best[1]:
        out[v] = True
    return out


def track_voxel(index, shape, src_codes, dst_codes):
    """New index of one voxel when a grid is re-laid from src to dst axis codes."""
    new = []
    for code in dst_codes:
        for s, src in enumerate(src_codes):
            if src == code:
                new.append(index[s])
                break
            if src == _OPPOSITE[code]:
                new.append(shape[s] - 1 - index[s])
                break
    return tuple(new)


def staple_oracle(raters, init_p, init_q, tol, max_iter, clip=1e-10):
    """Plain-loop binary STAPLE, one voxel and one rater at a time.

    Returns (W, p, q, iterations, converged) after the same schedule the
    package documents: E-step, M-step with clipping, stop when the largest
    posterior change is below tol (never on the first iteration).
    """
    raters = [list(np.asarray(r).ravel().astype(int)) for r in raters]
    J, V = len(raters), len(raters[0])
    prior = sum(sum(r) for r in raters) / (J * V)
    p = [init_p] * J
    q = [init_q] * J
    w_old = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = []
        for v in range(V):
            a, b = prior, 1 - prior
            for j in range(J):
                d = raters[j][v]
                a *= p[j] if d else (1 - p[j])
                b *= (1 - q[j]) if d else q[j]
            w.append(a / (a + b))
        sw = sum(w)
        sb = sum(1 - x for x in w)
        for j in range(J):
            if sw > 0:
                p[j] = sum(w[v] * raters[j][v] for v in range(V)) / sw
            if sb > 0:
                q[j] = sum((1 - w[v]) * (1 - raters[j][v]) for v in range(V)) / sb
            p[j] = min(max(p[j], clip), 1 - clip)
            q[j] = min(max(q[j], clip), 1 - clip)
        delta = float("inf") if w_old is None else max(abs(x - y) for x, y in zip(w, w_old))
        w_old = w
        if delta < tol:
            converged = True
            break
    return np.array(w_old), np.array(p), np.array(q), it, converged

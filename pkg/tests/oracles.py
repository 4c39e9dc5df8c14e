"""Brute-force twins used to cross-check the fast implementations.

Everything here is written straight from the documented definitions with
the dumbest data structures that work (dicts, recursion, exact fractions),
so a bug would have to appear in two very different shapes to slip through.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache

import numpy as np

from markvlm.metrics import metric_tokens, porter_stem


# ---------------------------------------------------------------------------
# caption metrics


def _gram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu(candidates, references, n):
    cand = [metric_tokens(c) for c in candidates]
    refs = [metric_tokens(r) for r in references]
    logs = []
    for k in range(1, n + 1):
        matched = 0
        total = 0
        for ct, rt in zip(cand, refs):
            cc = _gram_counts(ct, k)
            rc = _gram_counts(rt, k)
            for g, c in cc.items():
                matched += min(c, rc.get(g, 0))
            total += max(0, len(ct) - k + 1)
        if matched == 0 or total == 0:
            return 0.0
        logs.append(math.log(matched / total))
    cand_len = sum(len(t) for t in cand)
    ref_len = sum(len(t) for t in refs)
    if cand_len == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(sum(logs) / n)


def lcs(a, b):
    """Top-down memoised LCS, vs the package's bottom-up table."""
    ta, tb = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ta) or j == len(tb):
            return 0
        if ta[i] == tb[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(candidates, references, beta=1.2):
    total = 0.0
    for cand, ref in zip(candidates, references):
        ct = metric_tokens(cand)
        rt = metric_tokens(ref)
        m = lcs(ct, rt)
        if m == 0:
            continue
        p = m / len(ct)
        r = m / len(rt)
        total += (1 + beta * beta) * p * r / (r + beta * beta * p)
    return total / len(candidates)


def meteor(candidates, references):
    total = 0.0
    for cand, ref in zip(candidates, references):
        ct = metric_tokens(cand)
        rt = metric_tokens(ref)
        pairs = []
        taken_c = set()
        taken_r = set()
        for stage in ("exact", "stem"):
            for i in range(len(ct)):
                if i in taken_c:
                    continue
                for j in range(len(rt)):
                    if j in taken_r:
                        continue
                    same = ct[i] == rt[j] if stage == "exact" else (
                        porter_stem(ct[i]) == porter_stem(rt[j])
                    )
                    if same:
                        pairs.append((i, j))
                        taken_c.add(i)
                        taken_r.add(j)
                        break
        m = len(pairs)
        if m == 0:
            continue
        pairs.sort()
        chunks = 1
        for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
            if i1 != i0 + 1 or j1 != j0 + 1:
                chunks += 1
        p = m / len(ct)
        r = m / len(rt)
        f = 10 * p * r / (r + 9 * p)
        total += f * (1 - 0.5 * (chunks / m) ** 3)
    return total / len(candidates)


def cider(candidates, references, sigma=None):
    cand = [metric_tokens(c) for c in candidates]
    groups = []
    for entry in references:
        entry = [entry] if isinstance(entry, str) else list(entry)
        groups.append([metric_tokens(r) for r in entry])
    n_docs = len(groups)

    def idf_for(k):
        df = {}
        for group in groups:
            seen = set()
            for rt in group:
                seen.update(_gram_counts(rt, k))
            for g in seen:
                df[g] = df.get(g, 0) + 1
        return {g: math.log(n_docs) - math.log(max(1, c)) for g, c in df.items()}

    def vec(tokens, k, idf):
        out = {}
        for g, c in _gram_counts(tokens, k).items():
            w = idf.get(g, 0.0)
            if w > 0.0:
                out[g] = c * w
        return out

    def cos(a, b):
        if not a or not b:
            return 0.0
        dot = sum(v * b.get(g, 0.0) for g, v in a.items())
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return dot / (na * nb)

    total = 0.0
    for ct, group in zip(cand, groups):
        per_n = 0.0
        for k in range(1, 5):
            idf = idf_for(k)
            cv = vec(ct, k, idf)
            per_ref = 0.0
            for rt in group:
                sim = cos(cv, vec(rt, k, idf))
                if sigma is not None:
                    gap = len(ct) - len(rt)
                    sim *= math.exp(-(gap * gap) / (2 * sigma * sigma))
                per_ref += sim
            per_n += per_ref / len(group)
        total += per_n / 4.0
    return 10.0 * total / len(cand)


def semantic_similarity(pred, gt):
    a = {}
    for t in metric_tokens(pred):
        s = porter_stem(t)
        a[s] = a.get(s, 0) + 1
    b = {}
    for t in metric_tokens(gt):
        s = porter_stem(t)
        b[s] = b.get(s, 0) + 1
    dot = sum(v * b.get(k, 0) for k, v in a.items())
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return min(1.0, max(0.0, dot / (na * nb)))


def s_iou(pred, gt):
    a = {porter_stem(t) for t in metric_tokens(pred)}
    b = {porter_stem(t) for t in metric_tokens(gt)}
    if not (a | b):
        return 0.0
    return len(a & b) / len(a | b)


# ---------------------------------------------------------------------------
# randomized mini-corpora for the twin checks

_WORDS = (
    "the a ship ships sailing sails harbor cat cats running runs dog barked "
    "Red GREEN tank tanks near over 7 42 airport national agreed , . ' :"
).split()


def random_corpus(rng, max_sentences=10, max_tokens=12, grouped_refs=False):
    """(candidates, references) built from a pool with shared stems."""
    n = int(rng.integers(2, max_sentences + 1))

    def sentence():
        k = int(rng.integers(1, max_tokens + 1))
        return " ".join(rng.choice(_WORDS) for _ in range(k))

    cands = [sentence() for _ in range(n)]
    if grouped_refs:
        refs = [[sentence() for _ in range(int(rng.integers(1, 4)))] for _ in range(n)]
    else:
        refs = [sentence() for _ in range(n)]
    return cands, refs


# ---------------------------------------------------------------------------
# geometry


def representative_point(mask):
    """Interior-distance argmax by direct enumeration.

    Distance of a mask pixel is the Euclidean distance to the nearest pixel
    outside the mask, where everything beyond the image border counts as
    outside. Ties break to the smallest (y, x); returns (x, y).
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    outside = [(-1, x) for x in range(-1, w + 1)]
    outside += [(h, x) for x in range(-1, w + 1)]
    outside += [(y, -1) for y in range(h)]
    outside += [(y, w) for y in range(h)]
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                outside.append((y, x))
    best = None
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            d = min((y - oy) ** 2 + (x - ox) ** 2 for oy, ox in outside)
            if best is None or d > best[0]:
                best = (d, y, x)
    assert best is not None, "empty mask"
    return best[2], best[1]


def point_in_polygon(px, py, verts):
    """Even-odd ray cast in exact arithmetic; points on an edge are outside.

    Casts a ray in +x from (px, py) and counts proper crossings; vertices
    sitting exactly on the ray are handled with the half-open [lo, hi) rule.
    """
    px, py = Fraction(px), Fraction(py)
    n = len(verts)
    for i in range(n):
        ax, ay = Fraction(verts[i][0]), Fraction(verts[i][1])
        bx, by = Fraction(verts[(i + 1) % n][0]), Fraction(verts[(i + 1) % n][1])
        if ay == by:
            if py == ay and min(ax, bx) <= px <= max(ax, bx):
                return False
        else:
            t = (py - ay) / (by - ay)
            if 0 <= t <= 1 and ax + t * (bx - ax) == px:
                return False
    crossings = 0
    for i in range(n):
        ax, ay = Fraction(verts[i][0]), Fraction(verts[i][1])
        bx, by = Fraction(verts[(i + 1) % n][0]), Fraction(verts[(i + 1) % n][1])
        if ay == by:
            continue
        lo, hi = (ay, by) if ay < by else (by, ay)
        if not (lo <= py < hi):
            continue
        t = (py - ay) / (by - ay)
        if ax + t * (bx - ax) > px:
            crossings += 1
    return crossings % 2 == 1


def rasterize_polygon(verts, width, height):
    """Pixel mask from center-in-polygon tests, one pixel at a time."""
    mask = np.zeros((height, width), dtype=bool)
    for y in range(height):
        for x in range(width):
            mask[y, x] = point_in_polygon(
                Fraction(2 * x + 1, 2), Fraction(2 * y + 1, 2), verts
            )
    return mask

"""Clusterwise conformal prediction.

Covers grouping of taxonomy classes (score-quantile embeddings with k-means,
hierarchy-driven size thresholding), representation complexity of label
sets, similarity-based calibration subsets, and the distances and coverage
bounds used to reason about clustered calibration.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from .calibrate import ConformalBand
from .conditional import MondrianCalibration, mondrian_fit, mondrian_predict_band
from .core import DataError, NumericError, as_generator, check_alpha, empirical_quantile
from .scores import RegressionOutputs

__all__ = [
    "Hierarchy",
    "ClusterMap",
    "MixtureSpec",
    "quantile_embed",
    "kmeans",
    "composite_cluster",
    "size_threshold_cluster",
    "representation_complexity",
    "representation_complexity_greedy",
    "cluster_fit",
    "cluster_predict_band",
    "cluster_predict_sets",
    "similarity_calibration",
    "frechet_distance",
    "ks_distance",
    "tv_distance_numeric",
    "tv_uniform",
    "clusterwise_bound",
    "mixture_bound",
    "quantile_matched_coverage",
]


# ---------------------------------------------------------------------------
# hierarchies


class Hierarchy:
    """Rooted tree of label subsets; nodes are identified by their members.

    Build one from nested lists (``[[1, 3], 2]`` is a root over ``{1, 3}``
    and ``{2}``) or from the line format read by :meth:`from_lines`.
    """

    def __init__(self, parent: Mapping[frozenset, frozenset | None]):
        self._parent = dict(parent)
        roots = [n for n, p in self._parent.items() if p is None]
        if len(roots) != 1:
            raise DataError(f"hierarchy must have exactly one root, found {len(roots)}")
        self.root = roots[0]
        self._children: dict[frozenset, list[frozenset]] = {n: [] for n in self._parent}
        for n, p in self._parent.items():
            if p is not None:
                if p not in self._children:
                    raise DataError(f"parent {sorted(p)} of {sorted(n)} is not a node")
                self._children[p].append(n)
        for kids in self._children.values():
            kids.sort(key=lambda s: min(s))
        self._validate()
        self.leaf_of = {next(iter(n)): n for n in self._parent if not self._children[n]}

    def _validate(self):
        for node, kids in self._children.items():
            if not node:
                raise DataError("hierarchy nodes must be nonempty")
            if not kids:
                if len(node) != 1:
                    raise DataError(f"leaf {sorted(node)} is not a singleton")
                continue
            union = frozenset().union(*kids)
            if union != node or sum(len(k) for k in kids) != len(node):
                raise DataError(f"children of {sorted(node)} do not partition it")
            if len(kids) == 1:
                raise DataError(f"node {sorted(node)} has a single child equal to itself")

    @classmethod
    def from_nested(cls, nested) -> "Hierarchy":
        parent: dict[frozenset, frozenset | None] = {}

        def walk(item, par):
            if isinstance(item, (int, np.integer)):
                node = frozenset([int(item)])
                parent[node] = par
                return node
            kids = [item_members(k) for k in item]
            node = frozenset().union(*kids)
            parent[node] = par
            for k in item:
                walk(k, node)
            return node

        def item_members(item):
            if isinstance(item, (int, np.integer)):
                return frozenset([int(item)])
            return frozenset().union(*(item_members(k) for k in item))

        walk(nested, None)
        return cls(parent)

    @classmethod
    def from_lines(cls, lines) -> "Hierarchy":
        """Parse ``node_id parent_id member,member,...`` lines (internal
        nodes only; the root has parent ``0``). Leaves are implied."""
        internal: dict[int, tuple[int, frozenset]] = {}
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"hierarchy line {lineno}: expected 3 fields, got {len(parts)}")
            try:
                nid, pid = int(parts[0]), int(parts[1])
                members = frozenset(int(m) for m in parts[2].split(",") if m)
            except ValueError:
                raise DataError(f"hierarchy line {lineno}: malformed entry") from None
            if nid in internal or nid == 0:
                raise DataError(f"hierarchy line {lineno}: invalid or duplicate node id {nid}")
            internal[nid] = (pid, members)
        if not internal:
            raise DataError("hierarchy file has no nodes")
        parent: dict[frozenset, frozenset | None] = {}
        for nid, (pid, members) in internal.items():
            if pid != 0 and pid not in internal:
                raise DataError(f"node {nid} refers to unknown parent {pid}")
            if members in parent:
                raise DataError(f"node {nid} duplicates the members of another node")
            parent[members] = None if pid == 0 else internal[pid][1]
        covered: dict[frozenset, set] = {m: set() for m in parent}
        for m, p in parent.items():
            if p is not None:
                if not m < p:
                    raise DataError(f"node {sorted(m)} is not a proper subset of its parent")
                covered[p] |= m
        for m in list(parent):
            for c in sorted(m - covered[m]):
                leaf = frozenset([c])
                if leaf in parent and parent[leaf] is not None and parent[leaf] != m:
                    raise DataError(f"class {c} appears under two parents")
                parent.setdefault(leaf, m)
        return cls(parent)

    @classmethod
    def read(cls, path) -> "Hierarchy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @property
    def nodes(self) -> list[frozenset]:
        return list(self._parent)

    @property
    def classes(self) -> list[int]:
        return sorted(self.root)

    def parent(self, node: frozenset) -> frozenset | None:
        return self._parent[node]

    def children(self, node: frozenset) -> list[frozenset]:
        return list(self._children[node])

    def path(self, c: int) -> list[frozenset]:
        """Nodes from the root down to the leaf of class ``c``."""
        node = self.leaf_of[int(c)]
        out = [node]
        while self._parent[node] is not None:
            node = self._parent[node]
            out.append(node)
        return out[::-1]

    @property
    def depth(self) -> int:
        return max(len(self.path(c)) for c in self.root)

    def __contains__(self, node) -> bool:
        return frozenset(node) in self._parent


@dataclass(frozen=True)
class ClusterMap:
    """Partition of taxonomy classes into clusters ``1..m``."""

    members: dict
    cluster_of: dict = field(default_factory=dict)

    def __post_init__(self):
        members = {int(k): frozenset(v) for k, v in self.members.items()}
        cluster_of = {}
        for cid, mem in members.items():
            for c in mem:
                if c in cluster_of:
                    raise DataError(f"class {c} assigned to two clusters")
                cluster_of[c] = cid
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "cluster_of", cluster_of)

    @property
    def m(self) -> int:
        return len(self.members)

    def clusters(self, classes) -> np.ndarray:
        try:
            return np.array([self.cluster_of[c] for c in np.asarray(classes).ravel().tolist()], dtype=int)
        except KeyError as exc:
            raise DataError(f"class {exc.args[0]} has no cluster") from None

    @classmethod
    def from_groups(cls, groups) -> "ClusterMap":
        return cls({i + 1: frozenset(g) for i, g in enumerate(groups)})


# ---------------------------------------------------------------------------
# score-based clustering


def quantile_embed(per_class_scores: Mapping, levels) -> dict:
    levels = [float(q) for q in levels]
    if any(not 0 < q <= 1 for q in levels):
        raise ValueError("quantile levels must lie in (0, 1]")
    out = {}
    for c, scores in per_class_scores.items():
        arr = np.sort(np.asarray(scores, dtype=float).ravel())
        if arr.size == 0:
            raise DataError(f"class {c} has no scores to embed")
        out[c] = np.array([empirical_quantile(arr, q, presorted=True) for q in levels])
    return out


def _kmeanspp(points: np.ndarray, m: int, gen: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [int(gen.integers(n))]
    d2 = np.sum((points - points[centers[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total > 0:
            nxt = int(gen.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), centers)
            nxt = int(gen.choice(free))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[centers].astype(float)


def kmeans(points, m: int, rng=None, max_iter: int = 300, tol: float = 1e-10,
           names: Sequence | None = None) -> ClusterMap:
    """Lloyd's algorithm from k-means++ seeds.

    Returns a :class:`ClusterMap` over ``names`` (default ``1..n``), with
    cluster ids numbered by first appearance so the output is canonical.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot form {m} clusters from {n} points")
    names = list(range(1, n + 1)) if names is None else list(names)
    gen = as_generator(rng)
    centers = _kmeanspp(pts, m, gen)
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d, axis=1)
        new = centers.copy()
        for j in range(m):
            sel = labels == j
            if sel.any():
                new[j] = pts[sel].mean(axis=0)
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        if shift < tol:
            break
    remap: dict[int, int] = {}
    groups: dict[int, list] = {}
    for name, lab in zip(names, labels):
        cid = remap.setdefault(int(lab), len(remap) + 1)
        groups.setdefault(cid, []).append(name)
    return ClusterMap({cid: frozenset(g) for cid, g in groups.items()})


def composite_cluster(per_class_counts: Mapping, per_class_scores: Mapping, levels,
                      size_threshold: int, min_obs: int, m: int, rng=None) -> ClusterMap:
    """Size-adaptive score clustering.

    Classes with fewer than ``min_obs`` points share one rest cluster,
    classes with at least ``size_threshold`` points stay alone, and the
    classes in between are grouped by k-means on their quantile embeddings.
    """
    classes = sorted(per_class_counts)
    rest = [c for c in classes if per_class_counts[c] < min_obs]
    big = [c for c in classes if per_class_counts[c] >= size_threshold]
    mid = [c for c in classes if min_obs <= per_class_counts[c] < size_threshold]
    groups = [[c] for c in big]
    if mid:
        emb = quantile_embed({c: per_class_scores[c] for c in mid}, levels)
        km = kmeans(np.vstack([emb[c] for c in mid]), min(m, len(mid)), rng, names=mid)
        groups += [sorted(km.members[cid]) for cid in sorted(km.members)]
    if rest:
        groups.append(rest)
    return ClusterMap.from_groups(groups)


def size_threshold_cluster(hier: Hierarchy, per_class_counts: Mapping, size_threshold: float) -> ClusterMap:
    """Climb from each uncovered leaf until the node holds enough data.

    Clusters chosen earlier that fall inside a newly chosen ancestor are
    absorbed into it, so the result always partitions the classes by
    hierarchy nodes.
    """
    def count(node):
        return sum(per_class_counts.get(c, 0) for c in node)

    chosen: list[frozenset] = []
    for c in hier.classes:
        if any(c in node for node in chosen):
            continue
        node = hier.leaf_of[c]
        while count(node) < size_threshold and hier.parent(node) is not None:
            node = hier.parent(node)
        chosen = [other for other in chosen if not other <= node]
        chosen.append(node)
    chosen.sort(key=lambda s: min(s))
    return ClusterMap.from_groups(chosen)


def representation_complexity(hier: Hierarchy, labels) -> int:
    """Size of the smallest disjoint cover of ``labels`` by hierarchy nodes.

    A node belongs to the optimal cover exactly when it lies inside the set
    while its parent does not.
    """
    target = frozenset(int(c) for c in labels)
    if not target:
        return 0
    if not target <= hier.root:
        raise DataError(f"labels {sorted(target - hier.root)} are not in the hierarchy")
    return sum(
        1 for node in hier.nodes
        if node <= target and (hier.parent(node) is None or not hier.parent(node) <= target)
    )


def representation_complexity_greedy(hier: Hierarchy, labels) -> int:
    """Greedy search over nodes, largest first, starting from the root."""
    target = frozenset(int(c) for c in labels)
    if not target:
        return 0
    heap = [(-len(hier.root), sorted(hier.root), hier.root)]
    covered: set = set()
    count = 0
    while covered != target:
        if not heap:
            raise DataError("labels cannot be covered by the hierarchy")
        _, _, node = heapq.heappop(heap)
        if node <= target:
            covered |= node
            count += 1
        elif node & target:
            for kid in hier.children(node):
                heapq.heappush(heap, (-len(kid), sorted(kid), kid))
    return count


# ---------------------------------------------------------------------------
# clusterwise prediction


def cluster_fit(scores, classes, cmap: ClusterMap, alpha, strict_mode: bool = True) -> MondrianCalibration:
    """Calibrate once per cluster (pooling the scores of its classes)."""
    return mondrian_fit(scores, cmap.clusters(classes), alpha, cmap.m, strict_mode)


def cluster_predict_band(outputs: RegressionOutputs, classes, cmap: ClusterMap,
                         mcal: MondrianCalibration, band_kind: str = "point") -> ConformalBand:
    return mondrian_predict_band(outputs, cmap.clusters(classes), mcal, band_kind)


def cluster_predict_sets(label_scores, cmap: ClusterMap, mcal: MondrianCalibration) -> np.ndarray:
    """Membership mask for an (n, k) matrix of candidate-label scores, each
    label judged against the critical score of its own cluster."""
    s = np.atleast_2d(np.asarray(label_scores, dtype=float))
    k = s.shape[1]
    a = np.array([mcal.a_star(cmap.cluster_of[c]) if c in cmap.cluster_of else _no_cluster(c)
                  for c in range(1, k + 1)])
    return s <= a[None, :]


def _no_cluster(c):
    raise DataError(f"class {c} has no cluster")


def similarity_calibration(cal_scores, cal_targets, query_target, sim: Callable, top_k: int,
                           cal_features=None, query_features=None, sim_x: Callable | None = None,
                           top_l: int | None = None) -> np.ndarray:
    """Scores of calibration rows whose target is among the ``top_k`` most
    similar to the query target (ties at the cut-off included).

    With ``sim_x`` and ``top_l`` the rows must additionally have features
    among the ``top_l`` most similar to ``query_features``.
    """
    scores = np.asarray(cal_scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("empty calibration set")
    targets = list(cal_targets)
    if len(targets) != scores.size:
        raise ValueError("one target descriptor per calibration row is required")
    distinct = list(dict.fromkeys(targets))
    if not 1 <= top_k <= len(distinct):
        raise ValueError(f"top_k must lie in 1..{len(distinct)}")
    sims = {t: float(sim(query_target, t)) for t in distinct}
    cut = sorted(sims.values(), reverse=True)[top_k - 1]
    keep = np.array([sims[t] >= cut for t in targets])
    if sim_x is not None:
        if top_l is None or cal_features is None or query_features is None:
            raise ValueError("feature similarity needs cal_features, query_features and top_l")
        sx = np.array([float(sim_x(query_features, f)) for f in cal_features])
        if not 1 <= top_l <= sx.size:
            raise ValueError(f"top_l must lie in 1..{sx.size}")
        cut_x = np.sort(sx)[::-1][top_l - 1]
        keep &= sx >= cut_x
    return scores[keep]


# ---------------------------------------------------------------------------
# distances


class _Blank:
    def __repr__(self):
        return "<blank>"


BLANK = _Blank()


def frechet_distance(path_a: Sequence[Hashable], path_b: Sequence[Hashable], depth: int) -> float:
    """Discrete Fréchet-type distance between label paths of a tree of
    depth ``depth``; missing levels are padded with a blank symbol."""
    if depth < 1:
        raise ValueError("depth must be positive")
    n = depth - 1
    a = list(path_a)[:n] + [BLANK] * max(0, n - len(path_a))
    b = list(path_b)[:n] + [BLANK] * max(0, n - len(path_b))
    return sum(2.0 ** -(i + 1) * 0.5 for i in range(n) if a[i] != b[i] or (a[i] is BLANK) != (b[i] is BLANK))


def _ecdf(sorted_sample: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_sample, points, side="right") / sorted_sample.size


def ks_distance(F, G, grid=None) -> float:
    """Largest vertical gap between two CDFs.

    ``F`` and ``G`` are samples (empirical CDFs, evaluated exactly at all
    jump points) or callables evaluated on ``grid``.
    """
    if callable(F) or callable(G):
        if grid is None:
            raise ValueError("a grid is required for CDF callables")
        grid = np.asarray(grid, dtype=float)
        fv = F(grid) if callable(F) else _ecdf(np.sort(np.asarray(F, dtype=float)), grid)
        gv = G(grid) if callable(G) else _ecdf(np.sort(np.asarray(G, dtype=float)), grid)
        return float(np.max(np.abs(np.asarray(fv) - np.asarray(gv))))
    a = np.sort(np.asarray(F, dtype=float).ravel())
    b = np.sort(np.asarray(G, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    pts = np.concatenate([a, b])
    return float(np.max(np.abs(_ecdf(a, pts) - _ecdf(b, pts))))


def tv_distance_numeric(f: Callable, g: Callable, grid, breakpoints=()) -> tuple[float, float]:
    """Total variation distance ``0.5 * integral |f - g|`` by composite Simpson.

    Each panel between consecutive nodes (``grid`` merged with
    ``breakpoints``) is integrated with one-sided values at its ends, so
    jumps of the densities placed at breakpoints cost no accuracy. Returns
    ``(value, error_estimate)``; the value uses panels halved once more and
    the estimate is the Richardson difference between the two resolutions.
    """
    nodes = np.unique(np.concatenate([np.asarray(grid, dtype=float).ravel(),
                                      np.asarray(breakpoints, dtype=float).ravel()]))
    if nodes.size < 3:
        raise ValueError("need at least three grid points")

    def h(x):
        v = np.abs(np.asarray(f(x), dtype=float) - np.asarray(g(x), dtype=float))
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite density value")
        return v

    def rule(pts):
        left, right = pts[:-1], pts[1:]
        width = right - left
        nudge = width * 1e-9
        mid = 0.5 * (left + right)
        return float(np.sum(width / 6.0 * (h(left + nudge) + 4.0 * h(mid) + h(right - nudge))))

    coarse = rule(nodes)
    refined = np.sort(np.concatenate([nodes, 0.5 * (nodes[:-1] + nodes[1:])]))
    fine = rule(refined)
    return 0.5 * fine, 0.5 * abs(fine - coarse) / 15.0


def tv_uniform(a: float, w: float, a2: float, w2: float) -> float:
    """Closed-form TV distance between ``U[a, a+w]`` and ``U[a2, a2+w2]``."""
    if w <= 0 or w2 <= 0:
        raise ValueError("widths must be positive")
    if a > a2:
        a, w, a2, w2 = a2, w2, a, w
    if a2 - a >= w:
        return 1.0
    if a + w >= a2 + w2:
        return (w - w2) / w
    if w2 >= w:
        return ((a2 - a) + (w2 - w)) / w2
    return (a2 - a) / w


def clusterwise_bound(per_class_scores: Mapping, target, alpha) -> float:
    """Worst-case class coverage ``1 - alpha - max KS`` within a cluster."""
    alpha = check_alpha(alpha)
    if not per_class_scores:
        raise ValueError("empty cluster")
    if target not in per_class_scores:
        raise DataError(f"class {target} is not in the cluster")
    ref = per_class_scores[target]
    worst = max(ks_distance(ref, other) for other in per_class_scores.values())
    return max(0.0, 1.0 - alpha - worst)


def mixture_bound(weights, target, alpha) -> float:
    """``(1 - alpha)/w_c - sum_{c' != c} w_c'/w_c`` for mixture weights ``w``.

    ``weights`` is a mapping class -> weight or a sequence over ``1..k``.
    """
    alpha = check_alpha(alpha)
    w = dict(weights) if isinstance(weights, Mapping) else {i + 1: v for i, v in enumerate(weights)}
    wc = float(w[target])
    if wc <= 0:
        raise ValueError("target class has zero mixture weight")
    others = sum(float(v) for c, v in w.items() if c != target)
    return (1.0 - alpha) / wc - others / wc


@dataclass(frozen=True)
class MixtureSpec:
    """Mixture of per-class score distributions, classes ``1..k``."""

    weights: tuple
    cdfs: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        if len(w) != len(self.cdfs):
            raise ValueError("one CDF per mixture weight is required")
        if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "cdfs", tuple(self.cdfs))

    def cdf(self, a):
        return sum(w * np.asarray(F(a), dtype=float) for w, F in zip(self.weights, self.cdfs))

    def quantile(self, level: float, tol: float = 1e-12) -> float:
        lo, hi = -1.0, 1.0
        for _ in range(2000):
            if self.cdf(hi) >= level:
                break
            hi *= 2.0
        for _ in range(2000):
            if self.cdf(lo) < level:
                break
            lo *= 2.0
        if self.cdf(hi) < level or self.cdf(lo) >= level:
            raise NumericError("could not bracket the mixture quantile")
        while hi - lo > tol * max(1.0, abs(hi)):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) >= level:
                hi = mid
            else:
                lo = mid
        return hi


def quantile_matched_coverage(mix: MixtureSpec, target: int, alpha) -> float:
    """Large-calibration limit of the class coverage under pooled calibration:
    ``F_c(Q(1 - alpha))`` with ``Q`` the mixture quantile.

    Assumes the mixture CDF is continuous and strictly increasing at the
    quantile (atom-free scores).
    """
    alpha = check_alpha(alpha)
    q = mix.quantile(1.0 - alpha)
    delta = 1e-6 * max(1.0, abs(q))
    if float(mix.cdf(q + delta)) <= 1.0 - alpha:
        raise NumericError("quantile not unique: mixture CDF is flat at the level")
    return float(mix.cdfs[target - 1](q))

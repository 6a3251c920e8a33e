"""Retrieval metrics: AP/MAP, precision within a Hamming radius, CMC,
precision-recall curves, precision@N.

All functions consume QueryJudgment objects: one ranked list (already
junk-filtered upstream) plus the set of relevant image-ids for that
query. Relevant ids that never appear in the list still count toward the
denominator m, so unretrieved ground truth hurts recall-type metrics.

AP and CMC answer different questions: CMC(1) only sees the first
correct match, AP sees where every correct match sits. Two lists can tie
at CMC(1) = 1 while their APs differ, which is why both are reported.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .codebank import RankedList


class EmptyRelevantSet(ValueError):
    """A query with no relevant items; excluded from MAP and counted."""


@dataclass
class QueryJudgment:
    ranked: RankedList
    relevant: frozenset

    def __post_init__(self):
        if not isinstance(self.relevant, frozenset):
            self.relevant = frozenset(self.relevant)

    def hit_mask(self) -> np.ndarray:
        ids = self.ranked.image_ids
        return np.isin(ids, np.fromiter(self.relevant, dtype=np.int64,
                                        count=len(self.relevant)))


def average_precision(j: QueryJudgment) -> float:
    """AP = (1/m) sum over relevant ranks k of precision@k.

    m counts all relevant ids, retrieved or not. Raises EmptyRelevantSet
    when the query has no relevant items (caller decides exclusion).
    """
    m = len(j.relevant)
    if m == 0:
        raise EmptyRelevantSet("query has no relevant items")
    hits = j.hit_mask()
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precisions = np.cumsum(hits)[hits.astype(bool)] / ranks
    return float(precisions.sum() / m)


def mean_average_precision(judgments) -> float:
    """Mean AP over queries with nonempty relevant sets."""
    aps = [average_precision(j) for j in judgments if j.relevant]
    if not aps:
        raise ValueError("no includable queries (all relevant sets empty)")
    return float(np.mean(aps))


def count_excluded(judgments) -> int:
    return sum(1 for j in judgments if not j.relevant)


def precision_within_radius(judgments, n: int, radius: int = 2,
                            denominator: str = "top-n") -> float:
    """Precision of radius-limited retrieval, averaged over queries.

    Per query: truncate the ranked list to the top n, keep entries with
    distance <= radius, count the relevant ones. With denominator
    "top-n" (default) the count is divided by n, so queries with few
    in-radius neighbors are penalized; "within-radius" divides by the
    number of in-radius entries instead (empty -> 0 for that query).
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if denominator not in ("top-n", "within-radius"):
        raise ValueError(f"unknown denominator rule {denominator!r}")
    vals = []
    for j in judgments:
        if j.ranked.distances is None:
            raise ValueError("ranked list carries no distances")
        top_ids = j.ranked.image_ids[:n]
        top_d = j.ranked.distances[:n]
        within = top_d <= radius
        rel = np.isin(top_ids, np.fromiter(j.relevant, dtype=np.int64,
                                           count=len(j.relevant)))
        hits = int((within & rel).sum())
        if denominator == "top-n":
            vals.append(hits / n)
        else:
            k = int(within.sum())
            vals.append(hits / k if k else 0.0)
    if not vals:
        raise ValueError("no queries given")
    return float(np.mean(vals))


def first_hit_rank(j: QueryJudgment) -> int:
    """1-based rank of the first relevant item; 0 if never retrieved."""
    hits = j.hit_mask()
    pos = np.flatnonzero(hits)
    return int(pos[0]) + 1 if pos.size else 0


def cmc(judgments, max_rank: int):
    """Cumulative match characteristic: rate(k) = fraction of queries
    whose first correct match has rank <= k. Returns [(k, rate)].
    """
    judgments = list(judgments)
    if not judgments:
        raise ValueError("no queries given")
    for j in judgments:
        if not j.relevant:
            raise EmptyRelevantSet("cmc needs >= 1 relevant item per query")
    firsts = np.array([first_hit_rank(j) for j in judgments])
    ks = np.arange(1, max_rank + 1)
    rates = ((firsts[None, :] <= ks[:, None]) & (firsts[None, :] > 0)).mean(axis=1)
    return [(int(k), float(r)) for k, r in zip(ks, rates)]


def pr_curve_points(j: QueryJudgment):
    """Per-cut (recall, precision) for one query, cuts at every rank."""
    m = len(j.relevant)
    if m == 0:
        raise EmptyRelevantSet("pr curve needs a nonempty relevant set")
    hits = j.hit_mask().astype(np.int64)
    cum = np.cumsum(hits)
    cuts = np.arange(1, len(hits) + 1)
    return list(zip((cum / m).tolist(), (cum / cuts).tolist()))


def pr_auc(points) -> float:
    """Step-function area under a (recall, precision) curve.

    Sums precision times the recall increment at each cut, which for a
    single query's per-rank curve reproduces its AP exactly.
    """
    area, prev_r = 0.0, 0.0
    for r, p in points:
        area += p * (r - prev_r)
        prev_r = r
    return area


def precision_recall_curve(judgments):
    """Macro-averaged PR curve over queries.

    A single judgment gives its exact per-cut curve. Several are
    averaged on the union of their recall levels using step lookup: a
    query's precision at recall level t is its precision at the first
    cut reaching recall >= t, or at its last cut when t is never
    reached.
    """
    judgments = list(judgments)
    curves = [pr_curve_points(j) for j in judgments]
    if len(curves) == 1:
        return curves[0]
    grid = sorted({r for c in curves for r, _ in c})
    out = []
    for t in grid:
        ps = []
        for c in curves:
            rs = np.array([r for r, _ in c])
            idx = int(np.searchsorted(rs, t, side="left"))
            if idx >= len(c):
                idx = len(c) - 1
            ps.append(c[idx][1])
        out.append((t, float(np.mean(ps))))
    return out


def precision_at_n(judgments, ns):
    """Mean over queries of |relevant in top n| / n, for each n."""
    judgments = list(judgments)
    if not judgments:
        raise ValueError("no queries given")
    out = []
    for n in ns:
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        vals = []
        for j in judgments:
            hits = j.hit_mask()[:n]
            vals.append(hits.sum() / n)
        out.append((int(n), float(np.mean(vals))))
    return out


def single_shot(judgments, seed: int):
    """Subsample one relevant item per query (seeded), keeping lists."""
    rng = np.random.default_rng(seed)
    out = []
    for j in judgments:
        if not j.relevant:
            out.append(j)
            continue
        pick = rng.choice(sorted(j.relevant))
        out.append(QueryJudgment(j.ranked, frozenset([int(pick)])))
    return out


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class MetricsReport:
    bits: int
    n_queries: int
    n_excluded: int
    map: float
    precision_at_hamming2: float
    radius: int
    radius_top_n: int
    pr_curve: list
    precision_at_n: list
    cmc: list
    elapsed_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "bits": self.bits,
            "n_queries": self.n_queries,
            "n_excluded": self.n_excluded,
            "map": self.map,
            "precision_at_hamming2": self.precision_at_hamming2,
            "radius": self.radius,
            "radius_top_n": self.radius_top_n,
            "cmc": [{"rank": k, "rate": v} for k, v in self.cmc],
            "precision_at_n": [{"n": n, "precision": p}
                               for n, p in self.precision_at_n],
        }
        d.update(self.extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        """metrics.json plus pr.csv, cmc.csv, prec_at_n.csv.

        Wall-clock timing goes to timing.txt so the other files are
        byte-stable across reruns with the same seeds.
        """
        import os
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            f.write(self.to_json())
        with open(os.path.join(out_dir, "timing.txt"), "w") as f:
            f.write(f"elapsed_seconds {self.elapsed_seconds:.6f}\n")
        with open(os.path.join(out_dir, "pr.csv"), "w") as f:
            f.write("recall,precision\n")
            for r, p in self.pr_curve:
                f.write(f"{r!r},{p!r}\n")
        with open(os.path.join(out_dir, "cmc.csv"), "w") as f:
            f.write("rank,rate\n")
            for k, v in self.cmc:
                f.write(f"{k},{v!r}\n")
        with open(os.path.join(out_dir, "prec_at_n.csv"), "w") as f:
            f.write("n,precision\n")
            for n, p in self.precision_at_n:
                f.write(f"{n},{p!r}\n")


def compute_report(judgments, bits: int, radius: int = 2,
                   radius_top_n: int | None = None,
                   top_ns=(1, 5, 10), max_rank: int | None = None,
                   denominator: str = "top-n") -> MetricsReport:
    """Run the full metric suite over junk-filtered judgments."""
    t0 = time.perf_counter()
    judgments = list(judgments)
    if not judgments:
        raise ValueError("no queries given")
    scored = [j for j in judgments if j.relevant]
    if not scored:
        raise ValueError("no includable queries (all relevant sets empty)")
    gallery_len = max(len(j.ranked) for j in scored)
    if radius_top_n is None:
        radius_top_n = min(100, gallery_len)
    if max_rank is None:
        max_rank = gallery_len
    return MetricsReport(
        bits=bits,
        n_queries=len(judgments),
        n_excluded=count_excluded(judgments),
        map=mean_average_precision(scored),
        precision_at_hamming2=precision_within_radius(
            scored, radius_top_n, radius, denominator),
        radius=radius,
        radius_top_n=radius_top_n,
        pr_curve=precision_recall_curve(scored),
        precision_at_n=precision_at_n(scored, [n for n in top_ns
                                               if n <= gallery_len] or [1]),
        cmc=cmc(scored, max_rank),
        elapsed_seconds=time.perf_counter() - t0,
    )

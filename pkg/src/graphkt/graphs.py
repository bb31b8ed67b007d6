"""Concept relation graphs mined from response statistics or expert labels.

Three directed graphs over the KC set: P (prerequisite), S (its exact edge
reversal) and R (similarity, symmetric). Scores come from counting ordered
same-student response pairs (earlier response, later response): similarity is
the fraction of pairs answered with equal correctness, prerequisite the
fraction of discordant pairs where the earlier KC was the correct one. Pairs
below a co-occurrence floor are ignored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset

GRAPH_FORMAT = "graphkt-graphs"
GRAPH_VERSION = 1

GRAPH_KINDS = ("P", "S", "R")


@dataclass(frozen=True)
class GraphBuildConfig:
    eta: float
    min_cooccurrence: int = 10
    window: str = "student-history"

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.min_cooccurrence < 1:
            raise ValueError("min_cooccurrence must be at least 1")
        if self.window != "student-history":
            raise ValueError(f"unsupported window {self.window!r}")


class KcRelationGraphs:
    """Adjacency lists for the P/S/R graphs plus the scores behind each edge."""

    def __init__(self, n_kcs: int,
                 p_edges: dict[tuple[int, int], float],
                 r_edges: dict[tuple[int, int], float],
                 meta: dict | None = None):
        self.n_kcs = n_kcs
        self.meta = dict(meta or {})
        for (i, j) in list(p_edges) + list(r_edges):
            if i == j:
                raise ValueError(f"self loop on KC {i}")
            if not (0 <= i < n_kcs and 0 <= j < n_kcs):
                raise ValueError(f"edge ({i}, {j}) outside KC range")
        self.p_scores = dict(p_edges)
        self.r_scores: dict[tuple[int, int], float] = {}
        for (i, j), s in r_edges.items():
            self.r_scores[(i, j)] = s
            self.r_scores[(j, i)] = s
        self._adj = {
            "P": self._build_adj(self.p_scores),
            "S": self._build_adj({(j, i): s for (i, j), s in self.p_scores.items()}),
            "R": self._build_adj(self.r_scores),
        }

    def _build_adj(self, scores) -> list[tuple[int, ...]]:
        adj: list[set[int]] = [set() for _ in range(self.n_kcs)]
        for (i, j) in scores:
            adj[i].add(j)
        return [tuple(sorted(s)) for s in adj]

    def neighbors(self, which: str, c: int) -> tuple[int, ...]:
        if which not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {which!r}")
        return self._adj[which][c]

    def edge_count(self, which: str) -> int:
        return sum(len(nbrs) for nbrs in self._adj[which])

    def sparsity(self) -> dict[str, float]:
        possible = self.n_kcs * (self.n_kcs - 1)
        if possible == 0:
            return {k: 0.0 for k in GRAPH_KINDS}
        return {k: self.edge_count(k) / possible for k in GRAPH_KINDS}

    def drop(self, *, similarity: bool = False,
             prerequisite: bool = False) -> "KcRelationGraphs":
        """Return a copy with relation kinds removed (ablation support)."""
        return KcRelationGraphs(
            self.n_kcs,
            {} if prerequisite else dict(self.p_scores),
            {} if similarity else {k: v for k, v in self.r_scores.items()
                                   if k[0] < k[1]},
            meta=self.meta,
        )

    @classmethod
    def empty(cls, n_kcs: int) -> "KcRelationGraphs":
        return cls(n_kcs, {}, {})


def neighbors(graphs: KcRelationGraphs, which: str, c: int) -> list[int]:
    return list(graphs.neighbors(which, c))


@dataclass
class PairCounts:
    """Ordered-pair statistics (earlier KC as row, later KC as column)."""

    co: np.ndarray        # co-occurrence pairs
    equal: np.ndarray     # pairs with equal correctness
    discord: np.ndarray   # pairs with differing correctness
    first_correct: np.ndarray  # discordant pairs with the earlier one correct


def pair_counts(ds: Dataset, sequence_indices=None) -> PairCounts:
    """Count ordered same-student response pairs across the full history.

    Works on raw or preprocessed datasets; padded responses are excluded and
    a student's subsequences are concatenated back in order, so the counts
    refer to the pre-split history.
    """
    n = ds.n_kcs
    co = np.zeros((n, n))
    equal = np.zeros((n, n))
    first_correct = np.zeros((n, n))

    if sequence_indices is None:
        sequence_indices = range(len(ds.sequences))
    by_student: dict[int, list] = {}
    for idx in sequence_indices:
        by_student.setdefault(ds.sequences[idx].student, []).append(idx)

    for student in sorted(by_student):
        prior_right = np.zeros(n)
        prior_wrong = np.zeros(n)
        for idx in sorted(by_student[student]):
            for r in ds.sequences[idx].real():
                prior_any = prior_right + prior_wrong
                for cj in r.kcs:
                    co[:, cj] += prior_any
                    equal[:, cj] += prior_right if r.correct else prior_wrong
                    if not r.correct:
                        first_correct[:, cj] += prior_right
                for c in r.kcs:
                    if r.correct:
                        prior_right[c] += 1
                    else:
                        prior_wrong[c] += 1
    np.fill_diagonal(co, 0)
    np.fill_diagonal(equal, 0)
    np.fill_diagonal(first_correct, 0)
    return PairCounts(co=co, equal=equal, discord=co - equal,
                      first_correct=first_correct)


def similarity_score(ds: Dataset, ci: int, cj: int,
                     min_cooccurrence: int = 10,
                     counts: PairCounts | None = None) -> float | None:
    """Fraction of ordered (ci, cj) pairs answered with equal correctness.

    Returns None when the pair count is below the floor or ci == cj.
    """
    if ci == cj:
        return None
    counts = counts or pair_counts(ds)
    denom = counts.co[ci, cj]
    if denom < min_cooccurrence:
        return None
    return float(counts.equal[ci, cj] / denom)


def prerequisite_score(ds: Dataset, ci: int, cj: int,
                       min_cooccurrence: int = 10,
                       counts: PairCounts | None = None) -> float | None:
    """Among discordant ordered (ci, cj) pairs, fraction with ci correct."""
    if ci == cj:
        return None
    counts = counts or pair_counts(ds)
    denom = counts.discord[ci, cj]
    if denom < min_cooccurrence:
        return None
    return float(counts.first_correct[ci, cj] / denom)


def build_graphs(ds: Dataset, cfg: GraphBuildConfig,
                 sequence_indices=None) -> KcRelationGraphs:
    """Mine the P/S/R graphs by thresholding the pair statistics at eta.

    When both prerequisite directions clear the threshold only the stronger
    one is kept (ties keep both) to avoid trivial two-cycles. The similarity
    score of an unordered pair is the max of its two directed scores.
    """
    counts = pair_counts(ds, sequence_indices)
    n = ds.n_kcs
    min_co = cfg.min_cooccurrence

    pre = np.full((n, n), -1.0)
    ok = counts.discord >= min_co
    pre[ok] = counts.first_correct[ok] / counts.discord[ok]

    p_edges: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(n):
            if i == j or pre[i, j] < cfg.eta:
                continue
            if pre[j, i] >= cfg.eta and pre[j, i] > pre[i, j]:
                continue  # the reverse direction is stronger
            p_edges[(i, j)] = float(pre[i, j])

    sim = np.full((n, n), -1.0)
    ok = counts.co >= min_co
    sim[ok] = counts.equal[ok] / counts.co[ok]
    sim_sym = np.maximum(sim, sim.T)

    r_edges = {}
    for i in range(n):
        for j in range(i + 1, n):
            if sim_sym[i, j] >= cfg.eta:
                r_edges[(i, j)] = float(sim_sym[i, j])

    return KcRelationGraphs(n, p_edges, r_edges, meta={
        "eta": cfg.eta,
        "min_cooccurrence": cfg.min_cooccurrence,
    })


def load_labeled_graphs(path, min_confidence: float = 5.0,
                        n_kcs: int | None = None) -> KcRelationGraphs:
    """Load expert-labeled (src, dst, kind, confidence) rows.

    Confidence scores of duplicate rows are averaged per edge; only edges
    with mean confidence strictly above `min_confidence` are kept.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (line_no == 1 and not _is_int(row[0])):
                continue  # optional header
            if len(row) != 4:
                raise ValueError(f"line {line_no}: expected 4 columns")
            src, dst, kind, conf = row
            kind = kind.strip().lower()
            if kind not in ("prerequisite", "similar"):
                raise ValueError(f"line {line_no}: unknown relation kind {kind!r}")
            rows.append((int(src), int(dst), kind, float(conf)))
    if n_kcs is None:
        n_kcs = 1 + max((max(r[0], r[1]) for r in rows), default=-1)

    sums: dict[tuple[int, int, str], list[float]] = {}
    for src, dst, kind, conf in rows:
        if kind == "similar" and src > dst:
            src, dst = dst, src
        sums.setdefault((src, dst, kind), []).append(conf)

    p_edges, r_edges = {}, {}
    for (src, dst, kind), confs in sums.items():
        mean = sum(confs) / len(confs)
        if mean <= min_confidence:
            continue
        if kind == "prerequisite":
            p_edges[(src, dst)] = mean
        else:
            r_edges[(src, dst)] = mean
    return KcRelationGraphs(n_kcs, p_edges, r_edges,
                            meta={"min_confidence": min_confidence})


def _is_int(token: str) -> bool:
    try:
        int(token)
        return True
    except ValueError:
        return False


def export_graphs(graphs: KcRelationGraphs, path) -> None:
    meta = graphs.meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{GRAPH_FORMAT} {GRAPH_VERSION} "
                 f"eta={meta.get('eta', 'none')} "
                 f"min_cooccurrence={meta.get('min_cooccurrence', 'none')} "
                 f"n_kcs={graphs.n_kcs}\n")
        for (i, j), s in sorted(graphs.p_scores.items()):
            fh.write(f"P {i} {j} {s!r}\n")
        for (i, j), s in sorted(graphs.r_scores.items()):
            if i < j:
                fh.write(f"R {i} {j} {s!r}\n")


def import_graphs(path) -> KcRelationGraphs:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != [GRAPH_FORMAT, str(GRAPH_VERSION)]:
            raise ValueError(f"unsupported graph file header: {' '.join(header[:2])}")
        meta = {}
        n_kcs = None
        for token in header[2:]:
            key, value = token.split("=")
            if key == "n_kcs":
                n_kcs = int(value)
            elif value != "none":
                meta[key] = float(value) if "." in value or "e" in value else int(value)
        p_edges, r_edges = {}, {}
        for line in fh:
            kind, i, j, s = line.split()
            if kind == "P":
                p_edges[(int(i), int(j))] = float(s)
            elif kind == "R":
                r_edges[(int(i), int(j))] = float(s)
            else:
                raise ValueError(f"unknown edge kind {kind!r}")
    return KcRelationGraphs(n_kcs, p_edges, r_edges, meta=meta)

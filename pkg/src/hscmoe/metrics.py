"""Session-grouped ranking metrics, feature importance and gate clustering.

All per-session quantities are averaged with ``math.fsum`` so results do not
depend on summation order.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .data import session_slices

TOP_N = 10


@dataclass(frozen=True)
class SessionMetricReport:
    auc: float | None
    auc_at_10: float | None
    ndcg: float | None
    ndcg_at_10: float | None
    n_sessions_counted: int
    n_sessions_skipped: int

    def as_dict(self):
        return asdict(self)

    def to_text(self):
        return "\n".join(f"{k}={'empty' if v is None else v}" for k, v in self.as_dict().items())


def _mean(values):
    return math.fsum(values) / len(values) if values else None


def _pairs(pos_scores, neg_scores):
    """(concordant, tied) counts between positive and negative scores."""
    neg = np.sort(neg_scores)
    lo = np.searchsorted(neg, pos_scores, side="left")
    hi = np.searchsorted(neg, pos_scores, side="right")
    return int(lo.sum()), int((hi - lo).sum())


def _top(scores, n):
    return np.argsort(-np.asarray(scores), kind="stable")[:n]


def auc_single(scores, labels):
    """Pairwise AUC within one list; ``None`` without both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels != 1]
    if len(pos) == 0 or len(neg) == 0:
        return None
    conc, ties = _pairs(pos, neg)
    return (conc + 0.5 * ties) / (len(pos) * len(neg))


def session_auc(scores, labels, sessions, cutoff=None, per_session=False):
    """Mean per-session AUC; sessions lacking a positive or a negative are skipped.

    With ``cutoff`` only the top-``cutoff`` items by score enter the pair
    universe. Returns ``None`` when no session is countable.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    vals = []
    for rows in session_slices(sessions):
        if cutoff is not None:
            rows = rows[_top(scores[rows], cutoff)]
        v = auc_single(scores[rows], labels[rows])
        if v is not None:
            vals.append(v)
    return vals if per_session else _mean(vals)


def _discount(rank):
    return 1.0 / math.log2(rank + 1)


def ndcg_single(scores, labels, cutoff=None):
    order = _top(scores, len(scores))
    gains = np.asarray(labels)[order]
    ideal = np.sort(np.asarray(labels))[::-1]
    n = len(gains) if cutoff is None else min(cutoff, len(gains))
    idcg = math.fsum(float(ideal[r]) * _discount(r + 1) for r in range(n))
    if idcg == 0:
        return None
    dcg = math.fsum(float(gains[r]) * _discount(r + 1) for r in range(n))
    return dcg / idcg


def ndcg(scores, labels, sessions, cutoff=None, per_session=False):
    """Mean per-session NDCG with binary gains; sessions with no positive are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    vals = []
    for rows in session_slices(sessions):
        v = ndcg_single(scores[rows], labels[rows], cutoff)
        if v is not None:
            vals.append(v)
    return vals if per_session else _mean(vals)


def session_report(scores, labels, sessions) -> SessionMetricReport:
    groups = session_slices(sessions)
    labels = np.asarray(labels)
    counted = sum(1 for g in groups if 0 < labels[g].sum() < len(g))
    return SessionMetricReport(
        auc=session_auc(scores, labels, sessions),
        auc_at_10=session_auc(scores, labels, sessions, cutoff=TOP_N),
        ndcg=ndcg(scores, labels, sessions),
        ndcg_at_10=ndcg(scores, labels, sessions, cutoff=TOP_N),
        n_sessions_counted=counted,
        n_sessions_skipped=len(groups) - counted,
    )


def feature_importance(values, labels, sessions, per_session=False):
    """Session-mean fraction of (purchased, not purchased) pairs the feature
    orders strictly correctly. Ties count as misses.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    vals = []
    for rows in session_slices(sessions):
        f, y = values[rows], labels[rows]
        pos, neg = f[y == 1], f[y != 1]
        if len(pos) == 0 or len(neg) == 0:
            continue
        conc, _ = _pairs(pos, neg)
        vals.append(conc / (len(pos) * len(neg)))
    return vals if per_session else _mean(vals)


def feature_importance_by_category(dataset, feature, level="sc"):
    """FI of numeric column ``feature`` within each sub- or top-category."""
    col = dataset.sc if level == "sc" else dataset.tc
    out = {}
    for cat in np.unique(col):
        rows = np.flatnonzero(col == cat)
        v = feature_importance(dataset.numeric[rows, feature], dataset.y[rows], dataset.session[rows])
        if v is not None:
            out[int(cat)] = v
    return out


def fi_spread(dataset, feature):
    """Return ``(across_tc, within_tc)`` standard deviations of per-category FI.

    ``within_tc`` averages the spread among sibling sub-categories over
    top-categories.
    """
    by_tc = feature_importance_by_category(dataset, feature, "tc")
    by_sc = feature_importance_by_category(dataset, feature, "sc")
    across = float(np.std(list(by_tc.values())))
    within = []
    for tc in by_tc:
        sibs = [by_sc[sc] for sc in dataset.tree.children(tc) if sc in by_sc]
        if len(sibs) >= 2:
            within.append(float(np.std(sibs)))
    return across, float(np.mean(within)) if within else 0.0


def brand_concentration(dataset, column=2, coverage=0.8, level="tc"):
    """Per category: how many distinct values of a sparse column account for
    ``coverage`` of the positive labels, as a count and as a fraction of the
    distinct values present.
    """
    cat_col = dataset.sc if level == "sc" else dataset.tc
    out = {}
    for cat in np.unique(cat_col):
        rows = cat_col == cat
        vals = dataset.sparse[rows, column]
        pos = vals[dataset.y[rows] == 1]
        distinct = len(np.unique(vals))
        if len(pos) == 0:
            continue
        _, counts = np.unique(pos, return_counts=True)
        counts = np.sort(counts)[::-1]
        need = int(np.searchsorted(np.cumsum(counts), coverage * len(pos), side="left")) + 1
        out[int(cat)] = {"count": need, "fraction": need / distinct}
    return out


# gate vectors ------------------------------------------------------------

@dataclass(frozen=True)
class GateVectorRecord:
    sc_id: int
    tc_id: int
    group: str | None
    gate_vector: np.ndarray


def gate_cluster_separation(vectors, groups):
    """Mean cross-group pairwise distance over mean within-group distance.

    Returns ``inf`` when groups are internally collapsed but apart, and 1.0
    when every vector is identical.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    groups = np.asarray(groups)
    labels, counts = np.unique(groups, return_counts=True)
    if len(labels) < 2 or np.any(counts < 2):
        raise ValueError("need at least two groups with at least two records each")
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(vectors), k=1)
    same = (groups[:, None] == groups[None, :])[iu]
    d = dist[iu]
    within = d[same].mean()
    cross = d[~same].mean()
    if within == 0:
        return 1.0 if cross == 0 else math.inf
    return float(cross / within)


def write_gate_table(path_or_fh, records):
    """Tab-separated ``sc_id tc_id group v1..vN``, one row per record; no group is blank."""
    own = isinstance(path_or_fh, (str, os.PathLike))
    fh = open(path_or_fh, "w", encoding="utf-8") if own else path_or_fh
    try:
        n = len(records[0].gate_vector) if records else 0
        fh.write("\t".join(["sc_id", "tc_id", "group"] + [f"v{i + 1}" for i in range(n)]) + "\n")
        for r in records:
            fh.write("\t".join([str(r.sc_id), str(r.tc_id), "" if r.group is None else str(r.group)]
                               + [repr(float(v)) for v in r.gate_vector]) + "\n")
    finally:
        if own:
            fh.close()


def read_gate_table(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            records.append(GateVectorRecord(int(parts[0]), int(parts[1]), parts[2] or None,
                                            np.array([float(v) for v in parts[3:]])))
    return records

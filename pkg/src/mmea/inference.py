"""CSLS re-scoring, ranking and retrieval metrics (H@1, H@10, MRR)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from mmea.kgdata import degree_sum


def csls_adjust(S, k=3):
    """``2*S_ij - r_row(i) - r_col(j)`` with ``r`` the mean of the k largest
    entries of the row/column."""
    S = np.asarray(S, dtype=np.float64)
    if k < 1 or k > min(S.shape):
        raise ValueError(f"k={k} out of range for a {S.shape} matrix")
    r_row = np.mean(-np.partition(-S, k - 1, axis=1)[:, :k], axis=1)
    r_col = np.mean(-np.partition(-S, k - 1, axis=0)[:k, :], axis=0)
    return 2 * S - r_row[:, None] - r_col[None, :]


def rank_targets(S, query):
    """Target indices by descending score, ascending index on ties."""
    row = np.asarray(S, dtype=np.float64)
    row = row[query] if row.ndim == 2 else row
    return np.lexsort((np.arange(row.size), -row))


def gold_ranks(S, rows, cols):
    """1-based rank of ``S[rows[q], cols[q]]`` within its row (ties favour lower index)."""
    S = np.asarray(S, dtype=np.float64)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    gold = S[rows, cols][:, None]
    sub = S[rows]
    idx = np.arange(S.shape[1])[None, :]
    better = (sub > gold) | ((sub == gold) & (idx < cols[:, None]))
    return better.sum(axis=1) + 1


@dataclass
class EvalReport:
    hits_at_1: float
    hits_at_10: float
    mrr: float
    n_queries: int
    per_stratum: list = field(default_factory=list)

    def to_dict(self):
        d = {"h1": self.hits_at_1, "h10": self.hits_at_10, "mrr": self.mrr, "n": self.n_queries}
        if self.per_stratum:
            d["strata"] = [dict(s) for s in self.per_stratum]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["h1"], d["h10"], d["mrr"], d["n"], list(d.get("strata", [])))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stratum", "degsum_lo", "degsum_hi", "n", "h1", "h10", "mrr"])
        w.writerow(["all", "", "", self.n_queries, _f(self.hits_at_1), _f(self.hits_at_10), _f(self.mrr)])
        for k, s in enumerate(self.per_stratum):
            w.writerow([k, s["lo"], s["hi"], s["n"], _f(s["h1"]), _f(s["h10"]), _f(s["mrr"])])
        return buf.getvalue()


def _f(x):
    return f"{x:.6f}"


def _metrics(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(ranks <= 1)), float(np.mean(ranks <= 10)), float(np.mean(1.0 / ranks))


def evaluate(S, gold, use_csls=True, k=3, candidates="test"):
    """Rank every gold target among the candidate targets for its source query.

    ``S`` is either a full source x target similarity matrix (then rows and
    columns are restricted to the gold entities when ``candidates="test"``)
    or already the ``len(gold) x len(gold)`` test submatrix, signalled by
    ``candidates="given"`` where gold holds row/col positions.
    """
    gold = np.asarray(gold, dtype=np.int64).reshape(-1, 2)
    if len(gold) == 0:
        raise ValueError("empty gold list")
    S = np.asarray(S, dtype=np.float64)
    if candidates == "test":
        sub = S[np.ix_(gold[:, 0], gold[:, 1])]
        rows = cols = np.arange(len(gold))
    elif candidates == "all":
        sub = S[gold[:, 0]]
        rows, cols = np.arange(len(gold)), gold[:, 1]
    elif candidates == "given":
        sub, rows, cols = S, gold[:, 0], gold[:, 1]
    else:
        raise ValueError(f"unknown candidate pool {candidates!r}")
    if use_csls:
        sub = csls_adjust(sub, k)
    ranks = gold_ranks(sub, rows, cols)
    h1, h10, mrr = _metrics(ranks)
    return EvalReport(h1, h10, mrr, len(gold))


def gold_pair_ranks(S, gold, use_csls=True, k=3):
    gold = np.asarray(gold, dtype=np.int64).reshape(-1, 2)
    sub = np.asarray(S, dtype=np.float64)[np.ix_(gold[:, 0], gold[:, 1])]
    if use_csls:
        sub = csls_adjust(sub, k)
    idx = np.arange(len(gold))
    return gold_ranks(sub, idx, idx)


def stratified_evaluate(S, gold, task, n_strata=5, use_csls=True, k=3):
    """Overall metrics plus metrics per DegSum stratum.

    Gold pairs are sorted by DegSum (stable, source id on ties) and cut into
    ``n_strata`` near-equal groups; the remainder goes to the lowest strata.
    Ranks are computed once over the whole candidate pool.
    """
    gold = np.asarray(gold, dtype=np.int64).reshape(-1, 2)
    if len(gold) < n_strata:
        raise ValueError(f"{len(gold)} gold pairs cannot fill {n_strata} strata")
    ranks = gold_pair_ranks(S, gold, use_csls, k)
    ds = np.array([degree_sum(task, p) for p in gold])
    order = np.lexsort((gold[:, 0], ds))
    base, extra = divmod(len(gold), n_strata)
    sizes = [base + (1 if i < extra else 0) for i in range(n_strata)]
    strata = []
    start = 0
    for size in sizes:
        sel = order[start:start + size]
        h1, h10, mrr = _metrics(ranks[sel])
        strata.append({"lo": int(ds[sel].min()), "hi": int(ds[sel].max()), "n": int(size),
                       "h1": h1, "h10": h10, "mrr": mrr})
        start += size
    h1, h10, mrr = _metrics(ranks)
    return EvalReport(h1, h10, mrr, len(gold), strata)

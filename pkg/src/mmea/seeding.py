"""Training-pivot sources: greedy visual pivot induction and probation-based
iterative learning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ILConfig:
    K_e: int = 5   # epochs between proposal rounds
    K_s: int = 10  # consecutive rounds a candidate must survive

    def __post_init__(self):
        if self.K_e < 1 or self.K_s < 1:
            raise ValueError("K_e and K_s must be >= 1")


def induce_visual_pivots(S, n):
    """Greedily pick ``n`` one-to-one pairs in descending score order.

    Ties are broken by ascending (row, col). Returns a list of
    ``(row, col, score)`` in acceptance order.
    """
    S = np.asarray(S, dtype=np.float64)
    rows, cols = S.shape
    if n > min(rows, cols) or n < 0:
        raise ValueError(f"n={n} exceeds min dimension {min(rows, cols)}")
    # lexsort: last key is primary
    flat = S.ravel()
    r_idx, c_idx = np.divmod(np.arange(flat.size), cols)
    order = np.lexsort((c_idx, r_idx, -flat))
    used_r = np.zeros(rows, dtype=bool)
    used_c = np.zeros(cols, dtype=bool)
    out = []
    for k in order:
        if len(out) == n:
            break
        i, j = r_idx[k], c_idx[k]
        if used_r[i] or used_c[j]:
            continue
        used_r[i] = used_c[j] = True
        out.append((int(i), int(j), float(flat[k])))
    return out


def threshold_pivots(pivots, min_score):
    return [p for p in pivots if p[2] >= min_score]


@dataclass
class PivotLedger:
    permanent: list = field(default_factory=list)   # [(source, target)], insertion order
    candidates: dict = field(default_factory=dict)  # (source, target) -> streak
    round_counter: int = 0

    @classmethod
    def from_pairs(cls, pairs):
        return cls(permanent=[(int(s), int(t)) for s, t in np.asarray(pairs).reshape(-1, 2)])

    def permanent_array(self):
        return np.array(self.permanent, dtype=np.int64).reshape(-1, 2)

    def aligned_sources(self):
        return {s for s, _ in self.permanent}

    def aligned_targets(self):
        return {t for _, t in self.permanent}

    def dump(self):
        lines = [f"round\t{self.round_counter}"]
        lines += [f"permanent\t{s}\t{t}" for s, t in self.permanent]
        lines += [f"candidate\t{s}\t{t}\t{k}" for (s, t), k in self.candidates.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text):
        led = cls()
        for line in text.splitlines():
            parts = line.split("\t")
            if parts[0] == "round":
                led.round_counter = int(parts[1])
            elif parts[0] == "permanent":
                led.permanent.append((int(parts[1]), int(parts[2])))
            elif parts[0] == "candidate":
                led.candidates[(int(parts[1]), int(parts[2]))] = int(parts[3])
        return led


def mutual_nearest_neighbors(S):
    """Index pairs ``(i, j)`` where ``j`` is row ``i``'s argmax and ``i`` is column ``j``'s."""
    S = np.asarray(S)
    if S.size == 0:
        return []
    row_best = S.argmax(axis=1)
    col_best = S.argmax(axis=0)
    return [(i, int(j)) for i, j in enumerate(row_best) if col_best[j] == i]


def propose_round(S, ledger, cfg, source_ids=None, target_ids=None):
    """Run one probation round on similarities between unaligned entities.

    ``S`` rows/cols correspond to ``source_ids``/``target_ids`` (defaults:
    ``range``). The ledger is updated in place and returned.
    """
    S = np.asarray(S, dtype=np.float64)
    source_ids = np.arange(S.shape[0]) if source_ids is None else np.asarray(source_ids)
    target_ids = np.arange(S.shape[1]) if target_ids is None else np.asarray(target_ids)
    taken_s, taken_t = ledger.aligned_sources(), ledger.aligned_targets()
    proposed = set()
    for i, j in mutual_nearest_neighbors(S):
        s, t = int(source_ids[i]), int(target_ids[j])
        if s not in taken_s and t not in taken_t:
            proposed.add((s, t))

    fresh = {}
    promoted = []
    for pair in sorted(proposed):
        streak = ledger.candidates.get(pair, 0) + 1
        if streak >= cfg.K_s:
            promoted.append(pair)
        else:
            fresh[pair] = streak
    ledger.permanent.extend(promoted)
    ledger.candidates = fresh
    ledger.round_counter += 1
    return ledger

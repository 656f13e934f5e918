"""Maximum-similarity pairing of batch samples.

The similarity matrix is turned into an assignment cost with a prohibitive
diagonal and solved as a linear sum assignment.  On a symmetric cost the
assignment is a relaxation of perfect matching: half its cost is a lower bound
on any matching cost.  The permutation decomposes into cycles; 2-cycles are
pairs, even cycles split into two alternating matchings of which the cheaper
one keeps the bound, so a permutation without odd cycles yields a provably
optimal matching.  Odd cycles need a real repair: an exact subset DP for small
batches, greedy pairing otherwise.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

EXACT_REPAIR_LIMIT = 16


@dataclass
class PairingResult:
    pairs: list
    leftover: Optional[int] = None
    total_similarity: float = 0.0
    n_matchings: Optional[int] = None  # set by the brute-force oracle only

    def indices(self) -> list:
        out = [i for p in self.pairs for i in p]
        if self.leftover is not None:
            out.append(self.leftover)
        return sorted(out)

    def to_json(self) -> str:
        return json.dumps({"pairs": [list(p) for p in self.pairs], "leftover": self.leftover,
                           "total_similarity": self.total_similarity})


def _check_square(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {h.shape}")
    return h


def build_cost_matrix(h) -> np.ndarray:
    """Negated similarity with a finite sentinel diagonal that no optimum can use."""
    h = _check_square(h)
    n = h.shape[0]
    cost = -h.copy()
    # one diagonal entry must cost more than any spread of n - 1 off-diagonal entries plus a derangement
    sentinel = 2 * n * max(float(np.abs(h).max()), 1.0) + 1.0
    np.fill_diagonal(cost, sentinel)
    return cost


def _cycles(perm) -> list:
    seen = np.zeros(len(perm), dtype=bool)
    cycles = []
    for start in range(len(perm)):
        if seen[start]:
            continue
        cyc = []
        j = start
        while not seen[j]:
            seen[j] = True
            cyc.append(j)
            j = int(perm[j])
        cycles.append(cyc)
    return cycles


def _canon(pairs) -> list:
    return sorted(tuple(sorted((int(i), int(j)))) for i, j in pairs)


def _greedy_pairs(h: np.ndarray, idx: list) -> list:
    cand = sorted(
        ((h[i, j], i, j) for a, i in enumerate(idx) for j in idx[a + 1:]),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used = set()
    pairs = []
    for _, i, j in cand:
        if i not in used and j not in used:
            used.update((i, j))
            pairs.append((i, j))
    return pairs


def _exact_pairs(h: np.ndarray, idx: list) -> list:
    """Maximum-weight perfect matching by DP over subsets (small index sets only)."""
    n = len(idx)
    full = (1 << n) - 1
    best = {0: (0.0, None)}
    for mask in range(1, full + 1):
        if bin(mask).count("1") % 2:
            continue
        low = (mask & -mask).bit_length() - 1
        rest = mask & ~(1 << low)
        top = None
        b = rest
        while b:
            hi = (b & -b).bit_length() - 1
            b &= b - 1
            sub = rest & ~(1 << hi)
            val = best[sub][0] + h[idx[low], idx[hi]]
            if top is None or val > top[0] + 1e-12:
                top = (val, (low, hi, sub))
        best[mask] = top
    pairs = []
    mask = full
    while mask:
        _, (lo, hi, sub) = best[mask]
        pairs.append((idx[lo], idx[hi]))
        mask = sub
    return pairs


def _pick_leftover(h: np.ndarray) -> int:
    off = h.copy()
    np.fill_diagonal(off, -np.inf)
    best = off.max(axis=1)
    # least-similar to everyone else; lowest index on ties
    return int(np.flatnonzero(best == best.min())[0])


def optimal_pairs(h, repair: str = "auto") -> PairingResult:
    """Pair batch samples to maximise total similarity.

    ``repair`` controls what happens to odd assignment cycles: ``"exact"``
    (subset DP), ``"greedy"``, or ``"auto"`` (exact up to
    ``EXACT_REPAIR_LIMIT`` samples, greedy above).
    """
    h = _check_square(h)
    n = h.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to pair")
    if not np.isfinite(h).all():
        raise ValueError("similarity matrix has non-finite entries")
    if repair not in ("auto", "exact", "greedy"):
        raise ValueError(f"unknown repair mode {repair!r}")

    leftover = None
    active = list(range(n))
    if n % 2:
        leftover = _pick_leftover(h)
        active.remove(leftover)
    sub = h[np.ix_(active, active)]
    _, perm = linear_sum_assignment(build_cost_matrix(sub))

    pairs = []
    odd = []
    for cyc in _cycles(perm):
        if len(cyc) % 2:
            odd.extend(cyc)
            continue
        a = [(cyc[t], cyc[t + 1]) for t in range(0, len(cyc), 2)]
        b = [(cyc[t + 1], cyc[(t + 2) % len(cyc)]) for t in range(0, len(cyc), 2)]
        sa = sum(sub[i, j] for i, j in a)
        sb = sum(sub[i, j] for i, j in b)
        pairs.extend(a if sa >= sb else b)
    if odd:
        use_exact = repair == "exact" or (repair == "auto" and len(active) <= EXACT_REPAIR_LIMIT)
        if use_exact:
            # the kept even cycles are not guaranteed optimal once odd cycles exist
            pairs = _exact_pairs(sub, list(range(len(active))))
        else:
            pairs.extend(_greedy_pairs(sub, sorted(odd)))
    pairs = _canon((active[i], active[j]) for i, j in pairs)
    total = float(sum(h[i, j] for i, j in pairs))
    return PairingResult(pairs, leftover, total)


def _matchings(items: list):
    if not items:
        yield []
        return
    first = items[0]
    for k in range(1, len(items)):
        rest = items[1:k] + items[k + 1:]
        for m in _matchings(rest):
            yield [(first, items[k])] + m


def brute_force_matching(h, max_n: int = 10) -> PairingResult:
    """Enumerate every perfect matching and keep a best one (test oracle)."""
    h = _check_square(h)
    n = h.shape[0]
    if n % 2:
        raise ValueError("brute-force matching needs an even number of samples")
    if n > max_n:
        raise ValueError(f"{n} samples exceeds brute-force limit {max_n}")
    best = None
    count = 0
    for m in _matchings(list(range(n))):
        count += 1
        s = sum(h[i, j] for i, j in m)
        if best is None or s > best[0]:
            best = (s, m)
    return PairingResult(_canon(best[1]), None, float(best[0]), n_matchings=count)

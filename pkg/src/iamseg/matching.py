"""Prediction-to-target assignment: dice-based scores and Hungarian matching.

Matching maximizes score[i, k] = p^(1-alpha) * dice^alpha over injective
gt->prediction maps. Ties are broken toward the lexicographically smallest
(k, i) pair sequence, and `brute_force_assign` enforces the same rule by
enumeration so the two routes can be compared exactly.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

MATCH_ALPHA = 0.8
_SCORE_CLAMP = 1e-12
# unmatched-edge slack below this triggers the exact tie-break pass
_TIE_SLACK = 1e-9


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (gt_index, pred_index), sorted by gt_index
    unmatched_preds: list[int] = field(default_factory=list)

    def pred_for_gt(self) -> dict[int, int]:
        return {k: i for k, i in self.pairs}


def dice(m: np.ndarray, t: np.ndarray) -> float:
    """2*sum(m*t) / (sum(m^2) + sum(t^2)) for a soft mask vs a binary mask."""
    m = np.asarray(m, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError(f"dice shape mismatch: {m.shape} vs {t.shape}")
    denom = float((m * m).sum() + (t * t).sum())
    if denom < 1e-12:
        return 1.0 if (not m.any()) and (not t.any()) else 0.0
    return float(2.0 * (m * t).sum() / denom)


def matching_score(p: float, d: float, alpha: float = MATCH_ALPHA) -> float:
    """p^(1-alpha) * d^alpha with bases clamped away from zero."""
    p = max(float(p), _SCORE_CLAMP)
    d = max(float(d), _SCORE_CLAMP)
    return p ** (1.0 - alpha) * d**alpha


def build_score_matrix(
    class_probs: np.ndarray,
    masks: np.ndarray,
    gt_classes: list[int],
    gt_masks: np.ndarray,
    alpha: float = MATCH_ALPHA,
) -> np.ndarray:
    """score[i, k] for N predictions x K ground truths (masks at loss resolution)."""
    n = class_probs.shape[0]
    k = len(gt_classes)
    scores = np.zeros((n, k), dtype=np.float64)
    if k == 0:
        return scores
    m = np.asarray(masks, dtype=np.float64).reshape(n, -1)
    t = np.asarray(gt_masks, dtype=np.float64).reshape(k, -1)
    inter = m @ t.T  # [N, K]
    denom = (m * m).sum(axis=1)[:, None] + (t * t).sum(axis=1)[None, :]
    with np.errstate(invalid="ignore"):
        d = np.where(denom < 1e-12, 0.0, 2.0 * inter / np.maximum(denom, 1e-12))
    p = class_probs[:, np.asarray(gt_classes, dtype=np.int64)]  # [N, K]
    scores = np.maximum(p, _SCORE_CLAMP) ** (1.0 - alpha) * np.maximum(d, _SCORE_CLAMP) ** alpha
    return scores


def _canonical_total(scores: np.ndarray, preds_in_gt_order: np.ndarray) -> float:
    k = len(preds_in_gt_order)
    return float(np.sum(scores[preds_in_gt_order, np.arange(k)]))


def _augmenting_paths(scores: np.ndarray):
    """Optimal gt->pred indices via shortest augmenting paths with potentials.

    Rows of the internal cost matrix are ground truths (K), columns are
    predictions (N), K <= N; costs are negated scores. Returns the per-gt
    prediction indices plus the dual potentials certifying optimality.
    """
    n_pred, n_gt = scores.shape
    cost = -scores.T  # [K, N]
    inf = np.inf
    u = np.zeros(n_gt + 1)
    v = np.zeros(n_pred + 1)
    match = np.zeros(n_pred + 1, dtype=np.int64)  # 1-based gt matched to each pred column
    for row in range(1, n_gt + 1):
        match[0] = row
        j0 = 0
        minv = np.full(n_pred + 1, inf)
        way = np.zeros(n_pred + 1, dtype=np.int64)
        used = np.zeros(n_pred + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = ~used[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(used[1:], inf, minv[1:])
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][~used[1:]] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    result = np.full(n_gt, -1, dtype=np.int64)
    for col in range(1, n_pred + 1):
        if match[col] != 0:
            result[match[col] - 1] = col - 1
    return result, cost - u[1:, None] - v[None, 1:]


def _solve_max(scores: np.ndarray) -> np.ndarray:
    result, slack = _augmenting_paths(scores)
    if _has_alternate_optimum(slack, result, scores.shape[0]):
        result = _lexicographic_refine(scores)
    return result


def _has_alternate_optimum(slack: np.ndarray, result: np.ndarray, n_pred: int) -> bool:
    """Another maximum-total assignment exists iff the tight-edge graph has an
    alternating cycle, or an alternating path into a prediction left unmatched.

    Tight edges (zero reduced cost) are collected into a digraph on
    predictions: matched(k) -> i for every tight (k, i). A cycle, or a path
    reaching an unmatched prediction, rewires some gts at zero total change.
    """
    n_gt = len(result)
    tight = slack <= _TIE_SLACK  # [K, N]
    adjacency: list[list[int]] = [[] for _ in range(n_pred)]
    for k in range(n_gt):
        src = result[k]
        for i in np.flatnonzero(tight[k]):
            if i != src:
                adjacency[src].append(int(i))
    matched = set(result.tolist())
    # DFS from every matched pred: gray-node revisit = cycle; unmatched hit = path
    state = [0] * n_pred  # 0 white, 1 gray, 2 black
    for start in matched:
        if state[start]:
            continue
        stack: list[tuple[int, int]] = [(start, 0)]
        state[start] = 1
        while stack:
            node, edge_idx = stack[-1]
            if edge_idx < len(adjacency[node]):
                stack[-1] = (node, edge_idx + 1)
                nxt = adjacency[node][edge_idx]
                if nxt not in matched:
                    return True
                if state[nxt] == 1:
                    return True
                if state[nxt] == 0:
                    state[nxt] = 1
                    stack.append((nxt, 0))
            else:
                state[node] = 2
                stack.pop()
    return False


def _lexicographic_refine(scores: np.ndarray) -> np.ndarray:
    """Among maximum-total assignments, pick the smallest (k, i) sequence.

    For each gt in order, commit the smallest prediction whose optimal
    completion attains the running maximum; totals are compared as sums
    over entries in gt order so exact ties compare exactly.
    """
    n_pred, n_gt = scores.shape
    chosen: list[int] = []
    free = list(range(n_pred))
    for k in range(n_gt):
        best_i = free[0]
        best_total = -np.inf
        for i in free:
            rest_preds = [j for j in free if j != i]
            rest = scores[np.asarray(rest_preds, dtype=np.int64)][:, k + 1 :]
            if rest.shape[1]:
                completion, _ = _augmenting_paths(rest)
                tail = [rest_preds[c] for c in completion]
            else:
                tail = []
            candidate = np.asarray(chosen + [i] + tail, dtype=np.int64)
            total = _canonical_total(scores, candidate)
            if total > best_total:
                best_total = total
                best_i = i
        chosen.append(best_i)
        free.remove(best_i)
    return np.asarray(chosen, dtype=np.int64)


def hungarian(scores: np.ndarray) -> Assignment:
    """Maximum-total assignment of every gt column to a distinct prediction row."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {scores.shape}")
    n_pred, n_gt = scores.shape
    if n_gt == 0:
        return Assignment(pairs=[], unmatched_preds=list(range(n_pred)))
    if not np.isfinite(scores).all():
        raise ValueError("score matrix contains non-finite entries")
    if n_gt > n_pred:
        raise ValueError(f"more ground truths ({n_gt}) than predictions ({n_pred})")
    result = _solve_max(scores)
    pairs = [(k, int(result[k])) for k in range(n_gt)]
    used = set(result.tolist())
    return Assignment(pairs=pairs, unmatched_preds=[i for i in range(n_pred) if i not in used])


@functools.lru_cache(maxsize=64)
def _permutation_table(n_pred: int, n_gt: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n_pred), n_gt)), dtype=np.int64)


def brute_force_assign(scores: np.ndarray) -> Assignment:
    """Exhaustive maximum with the same lexicographic tie-break (K <= 7)."""
    scores = np.asarray(scores, dtype=np.float64)
    n_pred, n_gt = scores.shape
    if n_gt > 7:
        raise ValueError(f"brute force is limited to K <= 7, got K={n_gt}")
    if n_gt == 0:
        return Assignment(pairs=[], unmatched_preds=list(range(n_pred)))
    if not np.isfinite(scores).all():
        raise ValueError("score matrix contains non-finite entries")
    perms = _permutation_table(n_pred, n_gt)  # lexicographic order
    totals = scores[perms, np.arange(n_gt)].sum(axis=1)
    winner = perms[int(np.argmax(totals))]  # first max = smallest pair sequence
    pairs = [(k, int(winner[k])) for k in range(n_gt)]
    used = set(winner.tolist())
    return Assignment(pairs=pairs, unmatched_preds=[i for i in range(n_pred) if i not in used])


def assignment_total(scores: np.ndarray, assignment: Assignment) -> float:
    idx = np.asarray([i for _, i in sorted(assignment.pairs)], dtype=np.int64)
    return _canonical_total(np.asarray(scores, dtype=np.float64), idx)

"""Mining of significant, non-redundant dependency rules from antibiogram
cohorts, and conversion of rules into patterns with p-values.

A dependency rule ``antecedent -> consequence`` pairs a set of (antibiotic,
state) literals with one extra literal whose state they predict.  Rule
significance is the one-sided (positive dependence) Fisher exact p-value of
the 2x2 contingency table, computed in log space.  The search is a
breadth-first enumeration over antecedents with a lossless branch-and-bound
prune, so its output is identical to exhaustive enumeration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .data import AntibiogramReport, Pattern, PatternVocabulary, PresenceTensor

logger = logging.getLogger(__name__)

_STATES = ("R", "S")


@dataclass(frozen=True)
class MinerConfig:
    max_antecedent: int = 3
    p_max: float = 1e-4
    top_k_per_cohort: int = 50
    min_rows: int = 20

    def __post_init__(self):
        if self.max_antecedent < 1:
            raise ValueError("max_antecedent must be >= 1")
        if not 0.0 < self.p_max < 1.0:
            raise ValueError("p_max must lie in (0, 1)")
        if self.top_k_per_cohort < 1:
            raise ValueError("top_k_per_cohort must be >= 1")


@dataclass(frozen=True)
class DependencyRule:
    """antecedent -> consequence with its contingency counts and p-value.

    Counts: n usable rows, n_a satisfying the antecedent, n_b satisfying the
    consequence, n_ab satisfying both.
    """

    antecedent: tuple[tuple[int, str], ...]
    consequence: tuple[int, str]
    n: int
    n_a: int
    n_b: int
    n_ab: int
    p: float

    def pattern(self) -> Pattern:
        return Pattern.of(self.antecedent + (self.consequence,))


@dataclass(frozen=True)
class MinerResult:
    rules: tuple[DependencyRule, ...]
    too_few_rows: bool = False


# ---------------------------------------------------------------------------
# Fisher exact test (one-sided, positive dependence), log-space
# ---------------------------------------------------------------------------


def _check_counts(n, n_a, n_b, n_ab) -> None:
    if min(n, n_a, n_b, n_ab) < 0:
        raise ValueError("counts must be non-negative")
    if n_a > n or n_b > n:
        raise ValueError(f"marginals exceed total: n={n}, n_a={n_a}, n_b={n_b}")
    if n_ab > n_a or n_ab > n_b:
        raise ValueError(f"joint count exceeds a marginal: n_ab={n_ab}")
    if n_a + n_b - n_ab > n:
        raise ValueError("counts are inconsistent: n_a + n_b - n_ab > n")


def _lchoose(n, k):
    n = np.asarray(n, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def _log_pmf(n, n_a, n_b, i):
    """log P(X = i) for X ~ Hypergeometric(n, n_a, n_b)."""
    return _lchoose(n_a, i) + _lchoose(n - n_a, n_b - i) - _lchoose(n, n_b)


def fisher_p_batch(
    n: np.ndarray, n_a: np.ndarray, n_b: np.ndarray, n_ab: np.ndarray
) -> np.ndarray:
    """Vectorized upper-tail Fisher exact p = P(X >= n_ab)."""
    n = np.asarray(n, dtype=np.int64)
    n_a = np.asarray(n_a, dtype=np.int64)
    n_b = np.asarray(n_b, dtype=np.int64)
    n_ab = np.asarray(n_ab, dtype=np.int64)
    hi = np.minimum(n_a, n_b)
    max_terms = int(np.max(hi - n_ab, initial=-1)) + 1
    if max_terms <= 0:
        return np.ones(n.shape, dtype=np.float64)
    # tail term i = n_ab + j: first term's log pmf directly, later terms via
    # cumulative log ratios P(X = i + 1) / P(X = i)
    base = _log_pmf(n, n_a, n_b, n_ab)
    j = np.arange(max_terms - 1, dtype=np.float64)
    i = n_ab[..., None] + j
    valid = i < hi[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = (
            np.log(n_a[..., None] - i)
            + np.log(n_b[..., None] - i)
            - np.log(i + 1.0)
            - np.log(n[..., None] - n_a[..., None] - n_b[..., None] + i + 1.0)
        )
    log_ratio = np.where(valid, log_ratio, -np.inf)
    log_terms = np.concatenate(
        [base[..., None], base[..., None] + np.cumsum(log_ratio, axis=-1)], axis=-1
    )
    peak = np.max(log_terms, axis=-1)
    p = np.exp(peak) * np.sum(np.exp(log_terms - peak[..., None]), axis=-1)
    return np.minimum(p, 1.0)


def fisher_p(n: int, n_a: int, n_b: int, n_ab: int) -> float:
    """One-sided Fisher exact p-value for positive dependence.

    Returns the hypergeometric upper tail P(X >= n_ab) given margins
    (n, n_a, n_b), computed in log space.  Inconsistent counts raise
    ValueError.
    """
    _check_counts(n, n_a, n_b, n_ab)
    return float(
        fisher_p_batch(
            np.asarray([n]), np.asarray([n_a]), np.asarray([n_b]), np.asarray([n_ab])
        )[0]
    )


# ---------------------------------------------------------------------------
# Rule search
# ---------------------------------------------------------------------------

_R_CODE = 1
_S_CODE = 0
_NULL_CODE = -1

_STATE_CODE = {"R": _R_CODE, "S": _S_CODE, "NULL": _NULL_CODE}


def _encode_cohort(reports: Sequence[AntibiogramReport]) -> np.ndarray:
    return np.array(
        [[_STATE_CODE[s.value] for s in r.states] for r in reports], dtype=np.int8
    )


def _literal(lit: int) -> tuple[int, str]:
    return lit // 2, _STATES[lit % 2]


class _Frontier:
    """One BFS level: antecedent tuples with row masks and live consequences."""

    def __init__(self, antecedents, sat, known, alive):
        self.antecedents = antecedents  # list of literal-id tuples
        self.sat = sat                  # (F, rows) float64 0/1
        self.known = known              # (F, rows)
        self.alive = alive              # (F, 2M) bool


def mine_rules(
    reports: Sequence[AntibiogramReport], cfg: MinerConfig = MinerConfig()
) -> MinerResult:
    """Mine significant non-redundant dependency rules from one cohort.

    Rows with NULL in any antibiotic touched by a candidate rule are dropped
    for that candidate only (pairwise deletion).  Returned rules satisfy
    p <= p_max, no returned rule has a proper-subset antecedent with the
    same consequence and a p-value <= its own, and the list is sorted by
    (p, antecedent literals, consequence) then truncated to
    top_k_per_cohort.
    """
    if not reports:
        return MinerResult((), too_few_rows=cfg.min_rows > 0)
    states = _encode_cohort(reports)
    known_cells = states != _NULL_CODE
    n_usable_rows = int(np.count_nonzero(known_cells.any(axis=1)))
    if n_usable_rows < cfg.min_rows:
        logger.warning(
            "cohort has %d usable rows (< min_rows=%d); no rules mined",
            n_usable_rows,
            cfg.min_rows,
        )
        return MinerResult((), too_few_rows=True)

    n_rows, n_abx = states.shape
    n_lit = 2 * n_abx
    lit = np.zeros((n_lit, n_rows), dtype=np.float64)
    for m in range(n_abx):
        lit[2 * m] = states[:, m] == _R_CODE
        lit[2 * m + 1] = states[:, m] == _S_CODE
    known = known_cells.T.astype(np.float64)
    lit_abx = np.arange(n_lit) // 2

    log_pmax = np.log(cfg.p_max)
    emitted: dict[tuple[tuple[int, ...], int], DependencyRule] = {}

    frontier = _Frontier(
        antecedents=[()],
        sat=np.ones((1, n_rows)),
        known=np.ones((1, n_rows)),
        alive=np.ones((1, n_lit), dtype=bool),
    )
    for depth in range(1, cfg.max_antecedent + 1):
        frontier = _expand(frontier, lit, known, lit_abx)
        if not frontier.antecedents:
            break
        nab = frontier.sat @ lit.T
        na = np.repeat(frontier.sat @ known.T, 2, axis=1)
        nb = frontier.known @ lit.T
        n = np.repeat(frontier.known @ known.T, 2, axis=1)
        nab_i = np.rint(nab).astype(np.int64)
        na_i = np.rint(na).astype(np.int64)
        nb_i = np.rint(nb).astype(np.int64)
        n_i = np.rint(n).astype(np.int64)

        # cheap rejection by the single top tail term (p >= pmf(n_ab)
        # always), exact tail sums only for the survivors
        evali = frontier.alive & (nab_i > 0) & (na_i > 0) & (nb_i > 0)
        pmf = np.full(nab.shape, np.inf)
        if evali.any():
            pmf[evali] = _log_pmf(n_i[evali], na_i[evali], nb_i[evali], nab_i[evali])
        cand = pmf <= log_pmax
        if cand.any():
            p_exact = fisher_p_batch(n_i[cand], na_i[cand], nb_i[cand], nab_i[cand])
            for (row, col), p in zip(np.argwhere(cand), p_exact):
                if p <= cfg.p_max:
                    ante = frontier.antecedents[row]
                    rule = DependencyRule(
                        antecedent=tuple(_literal(l) for l in ante),
                        consequence=_literal(int(col)),
                        n=int(n_i[row, col]),
                        n_a=int(na_i[row, col]),
                        n_b=int(nb_i[row, col]),
                        n_ab=int(nab_i[row, col]),
                        p=float(p),
                    )
                    emitted[(ante, int(col))] = rule

        if depth == cfg.max_antecedent:
            break
        # lossless branch prune: every superset rule of (antecedent,
        # consequence) has p >= 1 / C(n, min(n_a, n // 2)) even under
        # pairwise deletion, because supersets can only shrink the usable
        # row set and the antecedent support
        cap = np.minimum(na_i, n_i // 2)
        keep = np.zeros(frontier.alive.shape, dtype=bool)
        al = frontier.alive
        keep[al] = _lchoose(n_i[al], cap[al]) >= -log_pmax
        frontier.alive = keep

    rules = _filter_redundant(emitted)
    rules.sort(key=_rule_sort_key)
    return MinerResult(tuple(rules[: cfg.top_k_per_cohort]))


def _expand(frontier: _Frontier, lit, known, lit_abx) -> _Frontier:
    """Generate canonical children (append a literal above the current max,
    on a fresh antibiotic) for every frontier node with a live consequence."""
    n_lit = lit.shape[0]
    f = len(frontier.antecedents)
    last = np.array([a[-1] if a else -1 for a in frontier.antecedents])
    ext = np.arange(n_lit)[None, :] > last[:, None]
    # no antibiotic reuse inside an antecedent
    used = np.zeros((f, n_lit // 2), dtype=bool)
    for i, ante in enumerate(frontier.antecedents):
        for l in ante:
            used[i, l // 2] = True
    ext &= ~used[:, lit_abx]
    # the child is worth creating only if a consequence stays live once the
    # extension's antibiotic is excluded
    alive_per_abx = frontier.alive[:, 0::2] | frontier.alive[:, 1::2]
    alive_count = frontier.alive.sum(axis=1)
    pair_count = frontier.alive[:, 0::2].astype(np.int64) + frontier.alive[:, 1::2]
    ext &= (alive_count[:, None] - pair_count[:, lit_abx]) > 0
    del alive_per_abx

    rows, lits = np.nonzero(ext)
    if rows.size == 0:
        return _Frontier([], np.empty((0, lit.shape[1])), np.empty((0, lit.shape[1])),
                         np.empty((0, n_lit), dtype=bool))
    sat = frontier.sat[rows] * lit[lits]
    kno = frontier.known[rows] * known[lit_abx[lits]]
    alive = frontier.alive[rows] & (lit_abx[None, :] != lit_abx[lits][:, None])
    antecedents = [frontier.antecedents[r] + (int(l),) for r, l in zip(rows, lits)]
    return _Frontier(antecedents, sat, kno, alive)


def _rule_sort_key(rule: DependencyRule):
    ante_ids = tuple(2 * m + _STATES.index(s) for m, s in rule.antecedent)
    cons_id = 2 * rule.consequence[0] + _STATES.index(rule.consequence[1])
    return (rule.p, ante_ids, cons_id)


def _filter_redundant(
    emitted: Mapping[tuple[tuple[int, ...], int], DependencyRule]
) -> list[DependencyRule]:
    """Drop rules whose antecedent has a proper subset (same consequence)
    achieving an equal or smaller p-value."""
    kept = []
    for (ante, cons), rule in emitted.items():
        redundant = False
        for size in range(1, len(ante)):
            for sub in combinations(ante, size):
                other = emitted.get((sub, cons))
                if other is not None and other.p <= rule.p:
                    redundant = True
                    break
            if redundant:
                break
        if not redundant:
            kept.append(rule)
    return kept


# ---------------------------------------------------------------------------
# Patterns and vocabulary
# ---------------------------------------------------------------------------


def rules_to_patterns(rules: Iterable[DependencyRule]) -> list[tuple[Pattern, float]]:
    """Union antecedent and consequence of each rule into a pattern.

    Duplicate patterns keep the smallest p-value.  Output is sorted by
    pattern items for determinism.
    """
    best: dict[Pattern, float] = {}
    for rule in rules:
        pat = rule.pattern()
        if pat not in best or rule.p < best[pat]:
            best[pat] = rule.p
    return sorted(best.items(), key=lambda kv: kv[0].items)


def build_vocabulary(
    cohort_patterns: Mapping[tuple[int, int], Sequence[tuple[Pattern, float]]],
    n_regions: int,
    years: Sequence[int],
) -> tuple[PatternVocabulary, PresenceTensor]:
    """Union per-cohort patterns into a vocabulary and presence tensor.

    ``cohort_patterns`` maps (region, year) to that cohort's mined
    (pattern, p) list.  The vocabulary is the union over all supplied
    cohorts, in lexicographic pattern order; pass only training-year
    cohorts when the vocabulary must not see test years.
    """
    union = sorted(
        {pat for pats in cohort_patterns.values() for pat, _ in pats},
        key=lambda p: p.items,
    )
    vocab = PatternVocabulary(tuple(union))
    tensor = presence_for_vocab(vocab, cohort_patterns, n_regions, years)
    return vocab, tensor


def presence_for_vocab(
    vocab: PatternVocabulary,
    cohort_patterns: Mapping[tuple[int, int], Sequence[tuple[Pattern, float]]],
    n_regions: int,
    years: Sequence[int],
) -> PresenceTensor:
    """Fill a presence tensor for a fixed vocabulary.

    Patterns outside the vocabulary are ignored, which is what keeps test
    years from enlarging a training-time vocabulary.
    """
    year_idx = {y: t for t, y in enumerate(years)}
    index = vocab.index()
    q = np.zeros((n_regions, len(years), vocab.size), dtype=np.uint8)
    pv = np.ones((n_regions, len(years), vocab.size), dtype=np.float64)
    for (k, year), pats in cohort_patterns.items():
        if year not in year_idx:
            continue
        t = year_idx[year]
        for pat, p in pats:
            u = index.get(pat)
            if u is None:
                continue
            q[k, t, u] = 1
            if p < pv[k, t, u]:
                pv[k, t, u] = p
    return PresenceTensor(q=q, pvalue=pv, years=tuple(years))
